"""Semantic extraction for stereo pairs: soft tokens, hard tags, tag merging.

A single shared-weight CNN encodes each view into a soft token sequence; a
multi-label head turns tokens into per-view tag sets; the two sets are merged
by set union so both views condition on the same hard prompt.  The merged tag
ids index a learned embedding table (an empty set maps to a dedicated null
token).  The extractor is pretrained on the synthetic dataset with binary
cross entropy and frozen before diffusion training.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .images import StereoImagePair, to_tensor

# Attribute words of the synthetic scene generator; 32 tags total.
COLOR_TAGS = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"]
TEXTURE_TAGS = ["plain", "stripes", "checker", "dots", "gradient", "speckle"]
SIZE_TAGS = ["small", "medium", "large"]
COUNT_TAGS = ["few", "many"]
BACKGROUND_TAGS = ["light-bg", "dark-bg"]
BRIGHTNESS_TAGS = ["bright", "dim"]
CONTRAST_TAGS = ["high-contrast", "low-contrast"]
DEPTH_TAGS = ["near", "far"]
ASPECT_TAGS = ["wide", "tall"]
DENSITY_TAGS = ["textured", "smooth", "busy"]

DEFAULT_TAGS: list[str] = (
    COLOR_TAGS
    + TEXTURE_TAGS
    + SIZE_TAGS
    + COUNT_TAGS
    + BACKGROUND_TAGS
    + BRIGHTNESS_TAGS
    + CONTRAST_TAGS
    + DEPTH_TAGS
    + ASPECT_TAGS
    + DENSITY_TAGS
)


class SemanticsError(ValueError):
    """Vocabulary or shape violations."""


class TagVocabulary:
    """Ordered, duplicate-free tag list; line number = id in the text format."""

    def __init__(self, tags: Sequence[str] | None = None):
        self.tags = list(tags if tags is not None else DEFAULT_TAGS)
        if len(set(self.tags)) != len(self.tags):
            raise SemanticsError("vocabulary contains duplicate tags")
        self.index = {tag: i for i, tag in enumerate(self.tags)}

    def __len__(self) -> int:
        return len(self.tags)

    def ids_for(self, words: Iterable[str]) -> "TagSet":
        ids = []
        for w in words:
            if w not in self.index:
                raise SemanticsError(f"unknown tag {w!r}")
            ids.append(self.index[w])
        return TagSet(ids, len(self))

    def words_for(self, tag_set: "TagSet") -> list[str]:
        return [self.tags[i] for i in tag_set.ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tags) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TagVocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass(frozen=True)
class TagSet:
    """Sorted, duplicate-free tag ids over a fixed-size vocabulary."""

    ids: tuple[int, ...]
    vocab_size: int

    def __init__(self, ids: Iterable[int], vocab_size: int):
        unique = sorted(set(int(i) for i in ids))
        if unique and not (0 <= unique[0] and unique[-1] < vocab_size):
            raise SemanticsError(f"tag ids {unique} outside vocabulary [0, {vocab_size})")
        object.__setattr__(self, "ids", tuple(unique))
        object.__setattr__(self, "vocab_size", int(vocab_size))

    def __len__(self) -> int:
        return len(self.ids)

    def multi_hot(self) -> torch.Tensor:
        out = torch.zeros(self.vocab_size)
        for i in self.ids:
            out[i] = 1.0
        return out


@dataclass(frozen=True)
class SoftEmbedding:
    """Per-view token sequence, shape (tokens, dim)."""

    tokens: torch.Tensor


def tag_merge(h_l: TagSet, h_r: TagSet) -> TagSet:
    """Set union of the per-view tag sets (sorted, duplicate-free)."""
    if h_l.vocab_size != h_r.vocab_size:
        raise SemanticsError(
            f"vocabulary mismatch: {h_l.vocab_size} vs {h_r.vocab_size}"
        )
    return TagSet(set(h_l.ids) | set(h_r.ids), h_l.vocab_size)


class SemanticExtractor(nn.Module):
    """Shared image encoder + tag head + tag embedding table.

    ``input_size`` must be divisible by 4; the encoder produces
    ``(input_size / 4)**2`` soft tokens of width ``token_dim``.
    """

    def __init__(
        self,
        vocab: TagVocabulary | None = None,
        input_size: int = 16,
        token_dim: int = 64,
        threshold: float = 0.68,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if input_size % 4:
            raise SemanticsError("input_size must be divisible by 4")
        if not 0.0 < threshold < 1.0:
            raise SemanticsError(f"threshold must be in (0, 1), got {threshold}")
        self.vocab = vocab or TagVocabulary()
        self.input_size = input_size
        self.token_dim = token_dim
        self.threshold = threshold
        v = len(self.vocab)
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1, dtype=dtype),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1, dtype=dtype),
            nn.SiLU(),
            nn.Conv2d(64, token_dim, 1, dtype=dtype),
        )
        self.head = nn.Sequential(
            nn.Linear(token_dim, 64, dtype=dtype),
            nn.SiLU(),
            nn.Linear(64, v, dtype=dtype),
        )
        # Row len(vocab) is the null token used for the empty tag set.
        self.tag_table = nn.Embedding(v + 1, token_dim, dtype=dtype)

    @property
    def null_id(self) -> int:
        return len(self.vocab)

    # -- operations --------------------------------------------------------

    def image_encode(self, img: np.ndarray | torch.Tensor) -> SoftEmbedding:
        """Encode one [0,1] RGB image into a soft token sequence."""
        x = to_tensor(img) if isinstance(img, np.ndarray) else img
        x = x.to(next(self.encoder.parameters()).dtype)
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            raise SemanticsError(
                f"expected {self.input_size}x{self.input_size} input, got "
                f"{x.shape[-2]}x{x.shape[-1]}"
            )
        feat = self.encoder(x)
        tokens = feat.flatten(2).transpose(1, 2).squeeze(0)
        return SoftEmbedding(tokens)

    def tag_logits(self, emb: SoftEmbedding) -> torch.Tensor:
        return self.head(emb.tokens.mean(dim=-2))

    def predict_tags(self, emb: SoftEmbedding, threshold: float | None = None) -> TagSet:
        """Multi-label prediction: tag included iff sigmoid(logit) > threshold."""
        thr = self.threshold if threshold is None else threshold
        if not 0.0 < thr < 1.0:
            raise SemanticsError(f"threshold must be in (0, 1), got {thr}")
        scores = torch.sigmoid(self.tag_logits(emb))
        ids = torch.nonzero(scores > thr, as_tuple=False).flatten().tolist()
        return TagSet(ids, len(self.vocab))

    def encode_tags(self, h: TagSet) -> torch.Tensor:
        """One embedding row per tag; the empty set maps to the null token."""
        if h.vocab_size != len(self.vocab):
            raise SemanticsError("tag set from a different vocabulary")
        if len(h) == 0:
            idx = torch.tensor([self.null_id])
        else:
            idx = torch.tensor(list(h.ids))
        return self.tag_table(idx)

    def extract(
        self, pair: StereoImagePair
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(p_s_l, p_s_r, merged hard embedding) for one pair."""
        p_s_l, p_s_r, h_l, h_r = self.extract_views(pair)
        p_h = self.encode_tags(tag_merge(h_l, h_r))
        return p_s_l.tokens, p_s_r.tokens, p_h

    def extract_views(
        self, pair: StereoImagePair
    ) -> tuple[SoftEmbedding, SoftEmbedding, TagSet, TagSet]:
        p_s_l = self.image_encode(pair.left)
        p_s_r = self.image_encode(pair.right)
        return p_s_l, p_s_r, self.predict_tags(p_s_l), self.predict_tags(p_s_r)

    def extract_unmerged(
        self, pair: StereoImagePair
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-view hard embeddings, used only when tag merging is ablated."""
        p_s_l, p_s_r, h_l, h_r = self.extract_views(pair)
        return (
            p_s_l.tokens,
            p_s_r.tokens,
            self.encode_tags(h_l),
            self.encode_tags(h_r),
        )

    def tags_as_json(self, pair: StereoImagePair) -> dict:
        """Exportable per-pair tag report."""
        _, _, h_l, h_r = self.extract_views(pair)
        merged = tag_merge(h_l, h_r)
        return {
            "left": self.vocab.words_for(h_l),
            "right": self.vocab.words_for(h_r),
            "merged": self.vocab.words_for(merged),
        }


# Functional wrappers matching the operation-style API.


def image_encode(img: np.ndarray, weights: SemanticExtractor) -> SoftEmbedding:
    return weights.image_encode(img)


def tag_head(emb: SoftEmbedding, weights: SemanticExtractor, threshold: float) -> TagSet:
    return weights.predict_tags(emb, threshold)


def encode_tags(h: TagSet, weights: SemanticExtractor) -> torch.Tensor:
    return weights.encode_tags(h)


def extract(
    pair: StereoImagePair, weights: SemanticExtractor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    return weights.extract(pair)


def pretrain_extractor(
    model: SemanticExtractor,
    images: Sequence[np.ndarray],
    labels: Sequence[TagSet],
    epochs: int,
    lr: float = 2e-3,
    batch_size: int = 16,
    seed: int = 0,
) -> list[float]:
    """Train the tagger with BCE on multi-hot labels; returns per-epoch losses."""
    if len(images) == 0:
        raise SemanticsError("empty pretraining dataset")
    if len(images) != len(labels):
        raise SemanticsError("images/labels length mismatch")
    xs = torch.stack([to_tensor(img) for img in images])
    ys = torch.stack([lab.multi_hot() for lab in labels])
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    loss_fn = nn.BCEWithLogitsLoss()
    history: list[float] = []
    n = len(images)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            batch = xs[idx]
            feats = model.encoder(batch).flatten(2).transpose(1, 2)
            logits = model.head(feats.mean(dim=1))
            loss = loss_fn(logits, ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / n)
    return history
