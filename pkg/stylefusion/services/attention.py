"""Block-partitioned joint attention over [prompt; style; output] tokens."""
import json
import logging
import math
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ..core.exceptions import raise_shape_error
from ..models.config import DssiConfig, FusionMode
from ..models.tensors import (
    BlockAttention, DitBlockWeights, LayerTrace, ProjectionWeights, QkvBlocks, TokenBlocks,
)
from ..utils.linalg import Matrix, gaussian_matrix, make_rng, row_softmax
from . import dssi

logger = logging.getLogger(__name__)


class FullAttention(NamedTuple):
    """Attention output for every query block."""
    H_p: Matrix
    H_s: Matrix
    H_o: Matrix


class OutputAttention(NamedTuple):
    """Fused output-query attention and the blocks it was built from."""
    h_o: Matrix
    attn: BlockAttention


class BranchMasses(NamedTuple):
    """Per-row l1 mass of each attention block."""
    mass_p: np.ndarray
    mass_s: np.ndarray
    mass_o: np.ndarray


def project_qkv(blocks: TokenBlocks, w: ProjectionWeights) -> QkvBlocks:
    """Project every block independently; style blocks share one s slot."""
    if blocks.d != w.d:
        raise_shape_error("projection", f"width {blocks.d}", f"weights of width {w.d}")
    x_s = blocks.style
    return QkvBlocks(
        Q_p=blocks.x_p @ w.W_q, Q_s=x_s @ w.W_q, Q_o=blocks.x_o @ w.W_q,
        K_p=blocks.x_p @ w.W_k, K_s=x_s @ w.W_k, K_o=blocks.x_o @ w.W_k,
        V_p=blocks.x_p @ w.W_v, V_s=x_s @ w.W_v, V_o=blocks.x_o @ w.W_v,
    )


def _check_qkv(qkv: QkvBlocks, d: int) -> None:
    width = qkv.Q_o.shape[1]
    for name in ("Q_p", "Q_s", "Q_o", "K_p", "K_s", "K_o"):
        if getattr(qkv, name).shape[1] != width:
            raise_shape_error(name, f"width {width}", getattr(qkv, name).shape[1])
    for q, k, v in (("Q_p", "K_p", "V_p"), ("Q_s", "K_s", "V_s"), ("Q_o", "K_o", "V_o")):
        rows = {getattr(qkv, q).shape[0], getattr(qkv, k).shape[0], getattr(qkv, v).shape[0]}
        if len(rows) != 1:
            raise_shape_error(f"{q}/{k}/{v} rows", "equal counts", sorted(rows))
    if len({qkv.V_p.shape[1], qkv.V_s.shape[1], qkv.V_o.shape[1]}) != 1:
        raise_shape_error("value widths", "one shared width", (qkv.V_p.shape, qkv.V_s.shape, qkv.V_o.shape))
    if d < 1:
        raise_shape_error("d", ">= 1", d)


def scaled_logits(queries: Matrix, keys: Matrix, d: int) -> Matrix:
    return queries @ keys.T / math.sqrt(d)


def split_output_attention(logits: Matrix, counts: Tuple[int, int, int]) -> BlockAttention:
    """Softmax output-query logits over the full key axis and cut them into blocks."""
    n_p, n_s, _ = counts
    alpha = row_softmax(logits)
    return BlockAttention(
        logits_Z=logits,
        alpha_p=alpha[:, :n_p],
        alpha_s=alpha[:, n_p:n_p + n_s],
        alpha_o=alpha[:, n_p + n_s:],
    )


def output_block_attention(qkv: QkvBlocks, d: int) -> BlockAttention:
    _check_qkv(qkv, d)
    return split_output_attention(scaled_logits(qkv.Q_o, qkv.keys(), d), qkv.counts)


def full_block_attention(qkv: QkvBlocks, d: int) -> FullAttention:
    """Joint attention for all three query blocks over the concatenated keys."""
    _check_qkv(qkv, d)
    weights = row_softmax(scaled_logits(qkv.queries(), qkv.keys(), d))
    H = weights @ qkv.values()
    n_p, n_s = qkv.Q_p.shape[0], qkv.Q_s.shape[0]
    return FullAttention(H_p=H[:n_p], H_s=H[n_p:n_p + n_s], H_o=H[n_p + n_s:])


def vanilla_output_attention(qkv: QkvBlocks, d: int) -> OutputAttention:
    """h_o = alpha_p V_p + alpha_s V_s + alpha_o V_o with the alpha blocks returned alongside."""
    attn = output_block_attention(qkv, d)
    h_o = attn.alpha_p @ qkv.V_p + attn.alpha_s @ qkv.V_s + attn.alpha_o @ qkv.V_o
    return OutputAttention(h_o=h_o, attn=attn)


def branch_masses(attn: BlockAttention) -> BranchMasses:
    return BranchMasses(
        mass_p=np.abs(attn.alpha_p).sum(axis=1),
        mass_s=np.abs(attn.alpha_s).sum(axis=1),
        mass_o=np.abs(attn.alpha_o).sum(axis=1),
    )


def init_dit_weights(d: int, layers: int, seed: int) -> List[DitBlockWeights]:
    """Gaussian toy weights, one child stream per layer, scaled by 1/sqrt(fan_in)."""
    blocks = []
    for layer in range(layers):
        rng = make_rng(seed, layer)
        scale = 1.0 / math.sqrt(d)
        proj = ProjectionWeights(
            W_q=gaussian_matrix(d, d, 0.0, scale, rng),
            W_k=gaussian_matrix(d, d, 0.0, scale, rng),
            W_v=gaussian_matrix(d, d, 0.0, scale, rng),
        )
        blocks.append(DitBlockWeights(
            proj=proj,
            W_mlp1=gaussian_matrix(d, 4 * d, 0.0, scale, rng),
            W_mlp2=gaussian_matrix(4 * d, d, 0.0, 1.0 / math.sqrt(4 * d), rng),
        ))
    return blocks


def zero_dit_weights(d: int) -> DitBlockWeights:
    zeros = np.zeros((d, d))
    return DitBlockWeights(
        proj=ProjectionWeights(W_q=zeros, W_k=zeros, W_v=zeros),
        W_mlp1=np.zeros((d, 4 * d)),
        W_mlp2=np.zeros((4 * d, d)),
    )


class DitBlock:
    """Service for one residual attention + MLP block whose output queries are fused."""

    def __init__(self, weights: DitBlockWeights, fusion: Optional[DssiConfig] = None):
        self.weights = weights
        self.fuser = dssi.DssiFuser(fusion)

    def forward(self, blocks: TokenBlocks, layer: int = 0, apply_fusion: bool = True) -> Tuple[TokenBlocks, LayerTrace]:
        """x' = x + Attn(x), x'' = x' + ReLU(x' W1) W2, with the output-query trace."""
        w = self.weights
        d = blocks.d
        qkv = project_qkv(blocks, w.proj)
        full = full_block_attention(qkv, d)

        fuser = self.fuser if apply_fusion else self.fuser.with_mode(FusionMode.VANILLA)
        mode = fuser.config.mode
        attn = output_block_attention(qkv, d)
        h_o, lam = fuser.fuse(qkv, attn)

        x_mid = blocks.stacked() + np.concatenate([full.H_p, full.H_s, h_o], axis=0)
        x_out = x_mid + np.maximum(x_mid @ w.W_mlp1, 0.0) @ w.W_mlp2

        trace = LayerTrace(
            layer=layer,
            logits_Z=attn.logits_Z,
            alpha=attn.concatenated(),
            h_o=h_o,
            lam=lam,
            mode=mode.value,
            prompt_branch=attn.alpha_p @ qkv.V_p,
            style_branch=attn.alpha_s @ qkv.V_s,
        )
        logger.debug("layer %d mode=%s lambda=%s", layer, mode.value, lam)
        return blocks.with_rows(x_out), trace


def dit_block_forward_traced(
    blocks: TokenBlocks,
    w: DitBlockWeights,
    fusion: DssiConfig,
    layer: int = 0,
    apply_fusion: bool = True,
) -> Tuple[TokenBlocks, LayerTrace]:
    """One residual attention + MLP block, returning the output-query trace."""
    return DitBlock(w, fusion).forward(blocks, layer=layer, apply_fusion=apply_fusion)


def dit_block_forward(blocks: TokenBlocks, w: DitBlockWeights, fusion: DssiConfig) -> TokenBlocks:
    """x' = x + Attn(x), x'' = x' + ReLU(x' W1) W2; output queries fused per ``fusion.mode``."""
    out, _ = dit_block_forward_traced(blocks, w, fusion)
    return out


def weights_to_json(weights: List[DitBlockWeights], seed: Optional[int] = None) -> str:
    """Serialise a weight stack to the replayable ``{d, seed, blocks}`` document."""
    d = weights[0].proj.d if weights else 0
    document = {
        "d": d,
        "seed": seed,
        "blocks": [
            {
                "W_q": w.proj.W_q.tolist(),
                "W_k": w.proj.W_k.tolist(),
                "W_v": w.proj.W_v.tolist(),
                "W_mlp1": w.W_mlp1.tolist(),
                "W_mlp2": w.W_mlp2.tolist(),
            }
            for w in weights
        ],
    }
    return json.dumps(document)


def weights_from_json(text: str) -> List[DitBlockWeights]:
    document = json.loads(text)
    weights = [
        DitBlockWeights(
            proj=ProjectionWeights(W_q=np.array(b["W_q"]), W_k=np.array(b["W_k"]), W_v=np.array(b["W_v"])),
            W_mlp1=np.array(b["W_mlp1"]),
            W_mlp2=np.array(b["W_mlp2"]),
        )
        for b in document["blocks"]
    ]
    for w in weights:
        if w.proj.d != document["d"]:
            raise_shape_error("serialized weights", f"width {document['d']}", w.proj.d)
    return weights
