"""Scenario files: versioned YAML mappings that fully determine a run."""

from __future__ import annotations

from dataclasses import dataclass, field

import yaml

from .model import ApplicationSpec, EnvironmentImage, InvalidValue, NodeSpec


class ParseError(Exception):
    def __init__(self, message, path=None, line=None):
        loc = f"{path or '<scenario>'}" + (f":{line}" if line is not None else "")
        super().__init__(f"{loc}: {message}")
        self.path = path
        self.line = line


class ValidationError(Exception):
    def __init__(self, message, fieldpath=None):
        super().__init__(f"{fieldpath}: {message}" if fieldpath else message)
        self.fieldpath = fieldpath


@dataclass
class ScriptOp:
    at_ms: int
    op: str
    payload: dict
    tenant: str | None = None
    operator: bool = True


@dataclass
class Scenario:
    name: str
    mode: str
    seed: int
    duration_ms: int
    nodes: list[NodeSpec]
    images: list[EnvironmentImage]
    apps: list[tuple[ApplicationSpec, int, str]]  # (spec, submit_at_ms, tenant)
    script: list[ScriptOp] = field(default_factory=list)
    grace_s: int = 60
    retention_s: int = 3600


def _require(obj, key, fieldpath):
    if key not in obj:
        raise ValidationError(f"missing required field {key!r}", fieldpath)
    return obj[key]


def scenario_from_dict(doc, name="<scenario>"):
    if not isinstance(doc, dict):
        raise ValidationError("scenario document must be a mapping")
    if doc.get("schema") != 1:
        raise ValidationError("unsupported or missing schema version (want schema: 1)", "schema")
    mode = doc.get("mode", "symmetric")
    if mode not in ("symmetric", "asymmetric"):
        raise ValidationError(f"mode must be symmetric or asymmetric, got {mode!r}", "mode")
    duration_s = _require(doc, "duration_s", "duration_s")
    if not isinstance(duration_s, int) or duration_s < 0:
        raise ValidationError("duration_s must be a non-negative integer", "duration_s")

    nodes = []
    for i, n in enumerate(doc.get("cluster", [])):
        try:
            node = NodeSpec.from_json(n)
            node.validate()
        except (InvalidValue, KeyError, TypeError) as exc:
            raise ValidationError(str(exc), f"cluster[{i}]") from exc
        nodes.append(node)
    if len({n.node_id for n in nodes}) != len(nodes):
        raise ValidationError("node_ids must be unique", "cluster")

    images = []
    for i, img in enumerate(doc.get("images", [])):
        try:
            images.append(EnvironmentImage.from_json(img))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"missing field {exc}", f"images[{i}]") from exc
    image_ids = {img.image_id for img in images}
    if len(image_ids) != len(images):
        raise ValidationError("image_ids must be unique", "images")

    apps = []
    for i, entry in enumerate(doc.get("apps", [])):
        fieldpath = f"apps[{i}]"
        try:
            spec = ApplicationSpec.from_json(_require(entry, "spec", fieldpath))
            spec.validate()
        except (InvalidValue, KeyError, TypeError) as exc:
            raise ValidationError(str(exc), fieldpath) from exc
        if spec.kind == "container" and spec.image not in image_ids:
            raise ValidationError(f"unknown image {spec.image!r}", fieldpath)
        submit_at = entry.get("submit_at_s", 0)
        if not isinstance(submit_at, int) or submit_at < 0:
            raise ValidationError("submit_at_s must be a non-negative integer", fieldpath)
        apps.append((spec, submit_at * 1000, entry.get("tenant", "default")))
    app_ids = [spec.app_id for spec, _, _ in apps]
    if len(set(app_ids)) != len(app_ids):
        raise ValidationError("app_ids must be unique", "apps")

    script = []
    for i, entry in enumerate(doc.get("script", [])):
        fieldpath = f"script[{i}]"
        at_s = _require(entry, "at_s", fieldpath)
        op = _require(entry, "op", fieldpath)
        if not isinstance(at_s, int) or at_s < 0 or at_s > duration_s:
            raise ValidationError("at_s must be within [0, duration_s]", fieldpath)
        script.append(ScriptOp(
            at_ms=at_s * 1000,
            op=op,
            payload=entry.get("payload", {}),
            tenant=entry.get("tenant"),
            operator=entry.get("operator", True),
        ))
    script.sort(key=lambda s: s.at_ms)

    return Scenario(
        name=doc.get("name", name),
        mode=mode,
        seed=doc.get("seed", 0),
        duration_ms=duration_s * 1000,
        nodes=nodes,
        images=images,
        apps=sorted(apps, key=lambda a: (a[1], a[0].app_id)),
        script=script,
        grace_s=doc.get("grace_s", 60),
        retention_s=doc.get("retention_s", 3600),
    )


def load_scenario(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ParseError(f"no such scenario file: {exc.filename}", path) from exc
    except yaml.YAMLError as exc:
        line = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            line = mark.line + 1
        raise ParseError(str(exc).replace("\n", " "), path, line) from exc
    try:
        return scenario_from_dict(doc, name=str(path))
    except ValidationError as exc:
        raise ValidationError(str(exc), exc.fieldpath) from exc
