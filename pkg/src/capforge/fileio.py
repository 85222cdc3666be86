"""Caption file ingestion (tab-separated or COCO JSON) and atomic writes."""

from __future__ import annotations

import json
import os
import tempfile

from .vocab import CaptionRecord, read_corpus

CAPTIONS_VERSION = "# capforge-captions v1"


def write_atomic(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def import_coco_captions(document) -> list[CaptionRecord]:
    """One record per COCO annotation, in annotation order.

    ``document`` is the parsed JSON object or its text.
    """
    if isinstance(document, (str, bytes)):
        document = json.loads(document)
    if not isinstance(document, dict) or "images" not in document or "annotations" not in document:
        raise ValueError("COCO caption document needs 'images' and 'annotations' arrays")
    known = {str(img["id"]) for img in document["images"]}
    records = []
    for ann in document["annotations"]:
        image_id = str(ann["image_id"])
        if image_id not in known:
            raise ValueError(f"annotation refers to unknown image_id {image_id}")
        records.append(CaptionRecord.from_text(image_id, ann["caption"]))
    return records


def read_captions(path: str | os.PathLike) -> list[CaptionRecord]:
    """Load captions from COCO JSON or from ``image_id<TAB>caption`` lines."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if os.fspath(path).endswith(".json") or text.lstrip().startswith("{"):
        return import_coco_captions(text)
    return read_corpus(path)


def group_references(records) -> dict[str, list[tuple[str, ...]]]:
    refs: dict[str, list[tuple[str, ...]]] = {}
    for r in records:
        refs.setdefault(r.image_id, []).append(r.tokens)
    return refs


def format_captions(captions, header: str = CAPTIONS_VERSION) -> str:
    """``captions`` is an iterable of ``(image_id, token list)``."""
    return header + "\n" + "".join(f"{iid}\t{' '.join(toks)}\n" for iid, toks in captions)


def read_candidate_captions(path: str | os.PathLike) -> dict[str, tuple[str, ...]]:
    """Generated captions; an image with an empty caption maps to ``()``."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            image_id, _, text = line.partition("\t")
            if image_id in out:
                raise ValueError(f"{path}:{lineno}: duplicate caption for image {image_id}")
            out[image_id] = tuple(text.split())
    return out
