# SPDX-License-Identifier: Apache-2.0
"""Attention-map editing, probing and evaluation toolkit.

The compiled core lives in ``_core``; this wrapper turns its JSON text
results into Python objects.
"""

import json

from . import _core
from ._core import (
    ToolkitError,
    ValidationError,
    bpe_encode,
    clip_directional_similarity,
    clip_score,
    compute_attention,
    edit,
    generate,
    probe_sanity_gate,
)

__all__ = [
    "ToolkitError",
    "ValidationError",
    "bpe_encode",
    "check_request",
    "clip_directional_similarity",
    "clip_score",
    "compute_attention",
    "dataset_manifest",
    "edit",
    "generate",
    "probe_sanity_gate",
    "run_job",
    "schemas",
    "sites",
]


def schemas():
    """Every request schema, as served by ``GET /schema``."""
    return json.loads(_core.schemas_json())


def check_request(kind, request):
    """Returns None for a valid request, else ``(json_pointer, message)``."""
    return _core.check_request(kind, json.dumps(request))


def sites(backbone_id="", storage_root=""):
    """Attention site table, as served by ``GET /sites``."""
    return json.loads(_core.sites_json(backbone_id, storage_root))


def run_job(kind, request, storage_root=""):
    """Runs one job synchronously through the job store; returns its record."""
    return json.loads(_core.run_job_json(kind, json.dumps(request), str(storage_root)))


def dataset_manifest(dataset, assets_dir=""):
    """Builds an edit dataset and returns its manifest."""
    return json.loads(_core.dataset_manifest_json(dataset, str(assets_dir)))
