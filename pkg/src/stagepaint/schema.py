"""JSON Schema validation of run manifests."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema


@lru_cache(maxsize=None)
def manifest_schema() -> dict:
    text = resources.files("stagepaint.schemas").joinpath("manifest.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def validate_manifest(data: dict) -> None:
    """Raise ``jsonschema.ValidationError`` when ``data`` is not a valid manifest."""
    jsonschema.validate(data, manifest_schema())
