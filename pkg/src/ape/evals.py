"""Zero-shot classification and image/text retrieval recall.

Class vectors are built by template ensembling: each template text is
embedded through the text head, the normalized template embeddings are
averaged per class, and the mean is renormalized. Predictions take the
inner-product argmax against the class vectors; all ties (argmax and
retrieval ranking) break toward the lowest index so results are identical
across platforms. Correct-count accumulation uses 64-bit integers.

Eval sets reuse the shard format with the class label stored in the
sample_id field; template shards do the same with sample_id = class index.
An optional sidecar label map (lines "eval_label->classifier_index")
re-indexes shifted eval sets that cover only a class subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .heads import AlignmentHead
from .store.shards import ShardData

EVAL_BATCH = 4096


@dataclass
class ZeroShotClassifier:
    class_vectors: np.ndarray  # (C, d_out), unit rows
    class_names: list[str] | None = None

    @property
    def num_classes(self) -> int:
        return int(self.class_vectors.shape[0])


def build_classifier(
    head: AlignmentHead,
    templates: ShardData,
    num_classes: int | None = None,
    class_names: list[str] | None = None,
) -> ZeroShotClassifier:
    """Template-ensembled class vectors from a template shard.

    Each record's sample_id is its class index; classes may have any number
    of templates (>= 1 each).
    """
    labels = templates.sample_ids.astype(np.int64)
    if num_classes is None:
        if labels.size == 0:
            raise DataError("template shard is empty")
        num_classes = int(labels.max()) + 1
    embedded = embed_text_set(head, templates)
    d = embedded.shape[1]
    vectors = np.zeros((num_classes, d), dtype=np.float64)
    counts = np.zeros(num_classes, dtype=np.int64)
    for row, cls in enumerate(labels):
        if not 0 <= cls < num_classes:
            raise DataError(f"template record {row} has class {cls} outside [0, {num_classes})")
        vectors[cls] += embedded[row]
        counts[cls] += 1
    for cls in range(num_classes):
        if counts[cls] == 0:
            name = class_names[cls] if class_names else str(cls)
            raise DataError(f"class {name!r} has no templates")
    vectors /= counts[:, None]
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        cls = int(np.argmin(norms))
        raise DataError(f"class {cls} templates average to the zero vector")
    vectors /= norms
    return ZeroShotClassifier(
        class_vectors=vectors.astype(embedded.dtype), class_names=class_names
    )


def embed_text_set(head: AlignmentHead, data: ShardData) -> np.ndarray:
    parts = []
    for lo in range(0, len(data), EVAL_BATCH):
        hi = min(lo + EVAL_BATCH, len(data))
        off = data.token_offsets[lo: hi + 1]
        emb = head.embed_text(
            data.tokens[lo:hi],
            data.mask[lo:hi],
            data.token_ids[off[0]: off[-1]],
            off - off[0],
        )
        parts.append(emb.data)
    return np.concatenate(parts) if parts else np.empty((0, head.config.out_dim), np.float32)


def embed_image_set(head: AlignmentHead, images: np.ndarray) -> np.ndarray:
    parts = []
    for lo in range(0, images.shape[0], EVAL_BATCH):
        parts.append(head.embed_image(images[lo: lo + EVAL_BATCH]).data)
    return np.concatenate(parts) if parts else np.empty((0, head.config.out_dim), np.float32)


def read_label_map(path) -> dict[int, int]:
    """Sidecar label map: one "eval_label->classifier_index" line per class."""
    mapping: dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for ln, line in enumerate(fh):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                src, dst = line.split("->")
                mapping[int(src)] = int(dst)
            except ValueError:
                raise DataError(f"malformed label map line {ln + 1} in {path}: {line!r}") from None
    if not mapping:
        raise DataError(f"label map {path} has no entries")
    return mapping


def zero_shot_accuracy(
    classifier: ZeroShotClassifier,
    eval_set: ShardData,
    head: AlignmentHead,
    label_map: dict[int, int] | None = None,
) -> float:
    """Fraction of eval images whose argmax class vector matches the label."""
    labels = eval_set.sample_ids.astype(np.int64)
    if label_map is not None:
        try:
            labels = np.asarray([label_map[int(l)] for l in labels], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"eval label {exc} missing from label map") from None
    if labels.size and (labels.min() < 0 or labels.max() >= classifier.num_classes):
        raise DataError(
            f"eval label outside [0, {classifier.num_classes}); provide a label map"
        )
    correct = np.int64(0)
    total = np.int64(0)
    for lo in range(0, len(eval_set), EVAL_BATCH):
        hi = min(lo + EVAL_BATCH, len(eval_set))
        emb = embed_image_set(head, eval_set.images[lo:hi, 0])
        scores = emb @ classifier.class_vectors.T
        pred = np.argmax(scores, axis=1)  # first max wins: lowest-index tie-break
        correct += np.int64(np.sum(pred == labels[lo:hi]))
        total += np.int64(hi - lo)
    if total == 0:
        raise DataError("empty eval set")
    return float(correct / total)


def recall_at_k(
    img_emb: np.ndarray,
    txt_emb: np.ndarray,
    k: int,
    direction: str = "image_to_text",
) -> float:
    """Fraction of queries whose true counterpart ranks in the top k.

    Row i of both matrices forms a true pair. Ranking is by inner product,
    descending, ties broken toward the lower index. The default direction
    retrieves captions for each image; "text_to_image" is the transpose.
    """
    img_emb = np.asarray(img_emb)
    txt_emb = np.asarray(txt_emb)
    if img_emb.shape != txt_emb.shape or img_emb.ndim != 2:
        raise ConfigError(
            f"paired embedding matrices must share shape, got {img_emb.shape} and {txt_emb.shape}"
        )
    n = img_emb.shape[0]
    if k < 1 or k > n:
        raise ConfigError(f"k must be in [1, {n}], got {k}")
    if direction == "image_to_text":
        scores = img_emb @ txt_emb.T
    elif direction == "text_to_image":
        scores = txt_emb @ img_emb.T
    else:
        raise ConfigError(f"unknown retrieval direction {direction!r}")
    hits = np.int64(0)
    for i in range(n):
        # stable sort on negated scores: equal scores keep ascending index order
        top = np.argsort(-scores[i], kind="stable")[:k]
        if i in top:
            hits += 1
    return float(hits / np.int64(n))


def recall_suite(img_emb: np.ndarray, txt_emb: np.ndarray, ks=(1, 5, 10), **kw) -> dict[str, float]:
    n = img_emb.shape[0]
    return {str(k): recall_at_k(img_emb, txt_emb, k, **kw) for k in ks if k <= n}
