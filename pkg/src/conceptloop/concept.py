"""Concept translation and the toy promptable mask head.

A small set of learned query rows cross-attends over the reasoning hidden
states ``H`` and yields concept rows ``Z``.  ``Z`` is stacked on top of text
embedding rows to form the prompt.  The mask head pools the prompt into one
vector and scores every pixel of a scene against it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .geometry import log_soft_box_tensor
from .synthbench import COLORS, SHAPES

VOCAB = COLORS + SHAPES + ("<unk>",)
_WORD_ID = {w: i for i, w in enumerate(VOCAB)}
UNK = _WORD_ID["<unk>"]
N_PIXEL_BASIS = 11
CHECKPOINT_VERSION = 1

# probabilities are clamped to this logit range before the focal log terms
_SATURATION = 20.0


def tokenize(text: str) -> list[int]:
    """Whitespace tokens mapped to vocabulary ids; unknown words share one row."""
    return [_WORD_ID.get(w, UNK) for w in text.lower().split()]


@dataclass(frozen=True)
class CoreConfig:
    C: int = 16
    L2: int = 8
    pool_hidden: int = 32
    box_temp: float = 0.02

    def __post_init__(self):
        if self.C < 1 or self.L2 < 1 or self.pool_hidden < 1:
            raise ValueError(f"dimensions must be positive: {self}")


def init_core_params(cfg: CoreConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    C, hid = cfg.C, cfg.pool_hidden
    s = 1.0 / math.sqrt(C)
    store = {
        "ctm.W_q": rng.normal(0.0, s, (C, C)),
        "ctm.W_k": rng.normal(0.0, s, (C, C)),
        "ctm.W_v": rng.normal(0.0, s, (C, C)),
        "text.table": rng.normal(0.0, 0.5, (len(VOCAB), C)),
        "mask.W1": rng.normal(0.0, s, (C, hid)),
        "mask.b1": np.zeros((1, hid)),
        "mask.W2": rng.normal(0.0, 1.0 / math.sqrt(hid), (hid, C)),
        "mask.b2": np.zeros((1, C)),
        "mask.W_pix": rng.normal(0.0, 1.0 / math.sqrt(N_PIXEL_BASIS), (N_PIXEL_BASIS, C)),
        "mask.W_box": rng.normal(0.0, 0.1 * s, (C, 4)),
        # decoded box starts near (0.1, 0.1, 0.9, 0.9) so every edge sees gradient
        "mask.b_box": np.array([[-2.2, -2.2, 2.2, 2.2]]),
        "mask.w_gate": rng.normal(0.0, s, (C, 1)),
    }
    # drawn last so the other parameters do not depend on L2, and a larger L2
    # extends a smaller one row by row
    store["ctm.queries"] = rng.normal(0.0, 1.0, (cfg.L2, C))
    return store


def leaves(store: Mapping[str, np.ndarray], prefixes: tuple[str, ...] | None = None,
           requires_grad: bool = True) -> dict[str, Tensor]:
    """Wrap stored arrays as graph leaves (optionally only names with given prefixes)."""
    return {k: Tensor(v, requires_grad=requires_grad and
                      (prefixes is None or k.startswith(prefixes)), name=k)
            for k, v in store.items()}


# ---- translation ------------------------------------------------------------


@dataclass(frozen=True)
class CTMParams:
    queries: Tensor
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor

    @classmethod
    def from_leaves(cls, p: Mapping[str, Tensor]) -> "CTMParams":
        return cls(p["ctm.queries"], p["ctm.W_q"], p["ctm.W_k"], p["ctm.W_v"])


def attention(H: Tensor, p: CTMParams, stats: dict | None = None) -> tuple[Tensor, Tensor]:
    """Returns ``(A, Z)``: row-stochastic attention ``L2 x L1`` and the mixed rows.

    ``stats["attention_multiplies"]`` receives the multiply count of the score
    and mixing products only (projections excluded).
    """
    C = p.queries.shape[1]
    if H.shape[1] != C:
        raise nx.ContractError(f"hidden states have {H.shape[1]} columns, concept queries have {C}")
    q = p.queries @ p.W_q
    k = H @ p.W_k
    v = H @ p.W_v
    with nx.MulCounter() as mc:
        scores = (q @ k.T) / math.sqrt(C)
        a = nx.softmax_rows(scores)
        z = a @ v
    if stats is not None:
        stats["attention_multiplies"] = mc.count
    return a, z


def translate(H: Tensor, p: CTMParams, stats: dict | None = None) -> Tensor:
    return attention(H, p, stats)[1]


@dataclass(frozen=True)
class ConceptPrompt:
    rows: Tensor
    n_concept: int

    @property
    def n_text(self) -> int:
        return self.rows.shape[0] - self.n_concept


def assemble_prompt(Z: Tensor | None, E_text: Tensor | None) -> ConceptPrompt:
    """Concept rows first, then text rows; either part may be absent."""
    parts = [t for t in (Z, E_text) if t is not None]
    if not parts:
        raise nx.ContractError("a prompt needs at least one row")
    if Z is not None and E_text is not None and Z.shape[1] != E_text.shape[1]:
        raise nx.ContractError(f"column mismatch: Z {Z.shape} vs text {E_text.shape}")
    rows = parts[0] if len(parts) == 1 else nx.concat_rows(parts)
    return ConceptPrompt(rows, 0 if Z is None else Z.shape[0])


def embed_text(words: str | list[int], p: Mapping[str, Tensor]) -> Tensor | None:
    """Rows of the text table for the known words; filler words are dropped.

    A non-empty input with no known word becomes a single ``<unk>`` row.
    """
    ids = tokenize(words) if isinstance(words, str) else list(words)
    if not ids:
        return None
    known = [i for i in ids if i != UNK] or [UNK]
    return nx.take_rows(p["text.table"], known)


# ---- mask head --------------------------------------------------------------


def pixel_basis(features: np.ndarray) -> np.ndarray:
    """Fixed quadratic expansion of per-pixel ``[r, g, b, x, y]`` (centered to [-1, 1]).

    Columns: a constant, the five features and their squares.  A linear
    readout of this basis scores a pixel by closeness to one color and by a
    smooth spatial preference.
    """
    f = 2.0 * np.asarray(features, dtype=np.float64) - 1.0
    return np.hstack([np.ones((f.shape[0], 1)), f, f * f])


@dataclass(frozen=True)
class MaskPrediction:
    logits: Tensor      # (h*w) x 1
    shape: tuple[int, int]
    box: Tensor | None = None   # 1 x 4 decoded spatial window, normalized

    @property
    def soft(self) -> np.ndarray:
        return nx._sigmoid_np(self.logits.data).reshape(self.shape)

    @property
    def presence(self) -> float:
        return float(nx._sigmoid_np(np.array([self.logits.data.max()]))[0])


def pool_prompt(prompt: ConceptPrompt, p: Mapping[str, Tensor]) -> Tensor:
    """Row-wise perceptron, then the mean over rows: a ``1 x C`` vector."""
    hidden = nx.relu(prompt.rows @ p["mask.W1"] + p["mask.b1"])
    return nx.mean_rows(hidden) @ p["mask.W2"] + p["mask.b2"]


def predict_mask(prompt: ConceptPrompt, features: np.ndarray, p: Mapping[str, Tensor],
                 shape: tuple[int, int], basis: np.ndarray | None = None,
                 box_temp: float = 0.02) -> MaskPrediction:
    """Logit per pixel is the inner product of its embedding with the pooled prompt.

    The embedding has a learned projection of the fixed pixel basis and, for
    prompts with concept rows, one spatial channel: the log of the soft
    rasterization of a window decoded from the pooled prompt plus the mean
    concept row.  The channel's weight is the square of a readout of the
    pooled vector, so a zero pooled vector gives zero logits.  Presence is the
    logistic of the largest logit.
    """
    v = pool_prompt(prompt, p)
    phi = Tensor(pixel_basis(features) if basis is None else basis)
    h, w = shape
    # (phi W_pix) v^T evaluated as phi (W_pix v^T): same product, fewer multiplies
    logits = phi @ (p["mask.W_pix"] @ v.T)
    box = None
    # text carries no location, so only prompts with concept rows get the window
    if prompt.n_concept:
        z = nx.mean_rows(nx.take_rows(prompt.rows, list(range(prompt.n_concept))))
        box = nx.sigmoid((v + z) @ p["mask.W_box"] + p["mask.b_box"])
        spatial = log_soft_box_tensor(box, w, h, box_temp)
        logits = logits + spatial * nx.square(v @ p["mask.w_gate"])
    return MaskPrediction(logits, shape, box)


# ---- losses -----------------------------------------------------------------


def _seg_terms(p: Tensor, logp: Tensor, log1mp: Tensor, gt: np.ndarray,
               eps: float, gamma: float, alpha: float) -> Tensor:
    g = Tensor(gt)
    inter = nx.sum_all(p * g)
    dice = 1.0 - (inter * 2.0 + eps) * _recip(nx.sum_all(p) + float(gt.sum()) + eps)
    pos = _pow(1.0 - p, gamma) * logp * g * alpha
    neg = _pow(p, gamma) * log1mp * Tensor(1.0 - gt) * (1.0 - alpha)
    focal = -nx.mean_all(pos + neg)
    return dice + focal


def _pow(a: Tensor, gamma: float) -> Tensor:
    if gamma == 2.0:
        return a * a
    return nx.exp(nx.log(nx.clip(a, 1e-300, np.inf)) * gamma)


def _recip(a: Tensor) -> Tensor:
    return nx.exp(-nx.log(a))


def _check_gt(shape, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 1)
    if gt.shape[0] != shape[0] * shape[1]:
        raise nx.ContractError(f"prediction has {shape[0] * shape[1]} pixels, gt has {gt.shape[0]}")
    return gt


def seg_loss(pred: Tensor, gt, eps: float = 1.0, gamma: float = 2.0,
             alpha: float = 0.25) -> Tensor:
    """Dice plus focal loss on soft probabilities (any 2-D layout)."""
    gt = _check_gt(pred.shape, gt)
    p = nx.reshape(pred, (gt.shape[0], 1))
    lo = float(nx._sigmoid_np(np.array([-_SATURATION]))[0])
    pc = nx.clip(p, lo, 1.0 - lo)
    return _seg_terms(p, nx.log(pc), nx.log(1.0 - pc), gt, eps, gamma, alpha)


def seg_loss_logits(logits: Tensor, gt, eps: float = 1.0, gamma: float = 2.0,
                    alpha: float = 0.25) -> Tensor:
    """Same loss computed from logits (stable log terms for training)."""
    gt = _check_gt(logits.shape, gt)
    z = nx.reshape(logits, (gt.shape[0], 1))
    return _seg_terms(nx.sigmoid(z), nx.log_sigmoid(z), nx.log_sigmoid(-z), gt,
                      eps, gamma, alpha)


# ---- checkpoints ------------------------------------------------------------


def save_checkpoint(path: Path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "layer_index": None}
    header.update(meta or {})
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {k: z[k].copy() for k in z.files if k != "__header__"}
    return params, header
