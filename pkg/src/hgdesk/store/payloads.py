"""Upload payload schemas.

Three versioned JSON document formats cross the device boundary; ingest
validates uploads against the schema implied by the test kind and rejects
anything else with SCHEMA_MISMATCH.

  phq8/v1    questionnaire responses (stored as a text payload)
  accel/v1   raw wrist accelerometer trace (file payload)
  pose2d/v1  2D pose keypoint series, image coordinates, y grows downward
             (file payload)
"""
from __future__ import annotations

import json
import math
from typing import Any, Callable, Mapping

from hgdesk.errors import SchemaMismatch

__all__ = [
    "validate_phq8_doc",
    "validate_accel_doc",
    "validate_pose_doc",
    "validate_for_kind",
    "EXPECTED_PAYLOAD_KIND",
]

# test kind -> required datapoint payload kind
EXPECTED_PAYLOAD_KIND: dict[str, str] = {
    "phq8": "text",
    "tug": "file",
    "sit_to_stand": "file",
}

_VALIDATORS: dict[str, Callable[[Mapping[str, Any]], dict[str, Any]]] = {}


def _fail(detail: str) -> None:
    raise SchemaMismatch(detail)


def _number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _require(doc: Mapping[str, Any], key: str, schema: str) -> Any:
    if key not in doc:
        _fail(f"{schema}: missing field {key!r}")
    return doc[key]


def validate_phq8_doc(doc: Mapping[str, Any]) -> dict[str, Any]:
    if not isinstance(doc, Mapping):
        _fail("phq8/v1: document must be a JSON object")
    if doc.get("schema") != "phq8/v1":
        _fail(f"phq8/v1: bad schema tag {doc.get('schema')!r}")
    for key in ("subject_id", "occurrence_id", "completed_at"):
        value = _require(doc, key, "phq8/v1")
        if not isinstance(value, str) or not value:
            _fail(f"phq8/v1: {key} must be a non-empty string")
    responses = _require(doc, "responses", "phq8/v1")
    if not isinstance(responses, list) or len(responses) != 8:
        _fail("phq8/v1: responses must be a list of exactly 8 items")
    prev_q = 0
    for i, item in enumerate(responses):
        if not isinstance(item, Mapping):
            _fail(f"phq8/v1: responses[{i}] must be an object")
        q = item.get("question")
        a = item.get("answer")
        if not isinstance(q, int) or isinstance(q, bool) or not 1 <= q <= 8:
            _fail(f"phq8/v1: responses[{i}].question must be an integer in 1..8")
        if q <= prev_q:
            _fail("phq8/v1: question numbers must be strictly ascending 1..8")
        prev_q = q
        if not isinstance(a, int) or isinstance(a, bool) or not 0 <= a <= 3:
            _fail(f"phq8/v1: responses[{i}].answer must be an integer in 0..3")
    if prev_q != 8:
        _fail("phq8/v1: question numbers must cover 1..8")
    return dict(doc)


def validate_accel_doc(doc: Mapping[str, Any]) -> dict[str, Any]:
    if not isinstance(doc, Mapping):
        _fail("accel/v1: document must be a JSON object")
    if doc.get("schema") != "accel/v1":
        _fail(f"accel/v1: bad schema tag {doc.get('schema')!r}")
    subject = _require(doc, "subject_id", "accel/v1")
    if not isinstance(subject, str) or not subject:
        _fail("accel/v1: subject_id must be a non-empty string")
    rate = _require(doc, "sample_rate_hz", "accel/v1")
    if not _number(rate) or rate <= 0:
        _fail("accel/v1: sample_rate_hz must be a positive number")
    start = _require(doc, "start_time", "accel/v1")
    if not isinstance(start, str) or not start:
        _fail("accel/v1: start_time must be a timestamp string")
    if _require(doc, "units", "accel/v1") != "m/s2":
        _fail('accel/v1: units must be "m/s2"')
    samples = _require(doc, "samples", "accel/v1")
    if not isinstance(samples, list):
        _fail("accel/v1: samples must be a list")
    for i, row in enumerate(samples):
        if not isinstance(row, list) or len(row) != 3 or not all(_number(v) for v in row):
            _fail(f"accel/v1: samples[{i}] must be [ax, ay, az] finite numbers")
    return dict(doc)


def validate_pose_doc(doc: Mapping[str, Any]) -> dict[str, Any]:
    if not isinstance(doc, Mapping):
        _fail("pose2d/v1: document must be a JSON object")
    if doc.get("schema") != "pose2d/v1":
        _fail(f"pose2d/v1: bad schema tag {doc.get('schema')!r}")
    fps = _require(doc, "fps", "pose2d/v1")
    if not _number(fps) or fps <= 0:
        _fail("pose2d/v1: fps must be a positive number")
    frames = _require(doc, "frames", "pose2d/v1")
    if not isinstance(frames, list) or not frames:
        _fail("pose2d/v1: frames must be a non-empty list")
    prev_t = -math.inf
    for i, frame in enumerate(frames):
        if not isinstance(frame, Mapping):
            _fail(f"pose2d/v1: frames[{i}] must be an object")
        t = frame.get("t")
        if not _number(t):
            _fail(f"pose2d/v1: frames[{i}].t must be a number (seconds)")
        if t <= prev_t:
            _fail("pose2d/v1: frame times must be strictly increasing")
        prev_t = t
        kps = frame.get("keypoints")
        if not isinstance(kps, Mapping):
            _fail(f"pose2d/v1: frames[{i}].keypoints must be an object")
        for name, triple in kps.items():
            if (
                not isinstance(triple, list)
                or len(triple) != 3
                or not all(_number(v) for v in triple)
            ):
                _fail(f"pose2d/v1: keypoint {name!r} must be [x, y, conf]")
            if not 0.0 <= triple[2] <= 1.0:
                _fail(f"pose2d/v1: keypoint {name!r} confidence must be in [0, 1]")
    return dict(doc)


_VALIDATORS["phq8/v1"] = validate_phq8_doc
_VALIDATORS["accel/v1"] = validate_accel_doc
_VALIDATORS["pose2d/v1"] = validate_pose_doc

_SCHEMA_FOR_KIND = {"phq8": "phq8/v1", "tug": "accel/v1", "sit_to_stand": "pose2d/v1"}


def validate_for_kind(test_kind: str, content: bytes | str) -> dict[str, Any]:
    """Parse + validate an uploaded document against the test kind's schema."""
    schema = _SCHEMA_FOR_KIND.get(test_kind)
    if schema is None:
        _fail(f"no upload schema for test kind {test_kind!r}")
    if isinstance(content, bytes):
        try:
            content = content.decode("utf-8")
        except UnicodeDecodeError:
            _fail(f"{schema}: payload is not UTF-8 JSON")
    try:
        doc = json.loads(content)
    except json.JSONDecodeError as exc:
        _fail(f"{schema}: payload is not valid JSON ({exc.msg})")
    return _VALIDATORS[schema](doc)
