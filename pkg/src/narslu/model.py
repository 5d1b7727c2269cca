"""The joint intent/slot network.

A Transformer encoder over the marker-prefixed utterance predicts the intent
from position 0 and each slot tag from [h_j ; h_cls], all in one parallel
pass. Sequential information comes from three places:

* every self-attention uses learned clipped relative-position terms on both
  keys and values (shared across heads) instead of absolute encodings;
* a mid-encoder refinement step classifies the running hidden states, embeds
  the soft results, and adds them back residually before the next layer;
* a causal tag decoder (cross-attending into the encoder output) is trained
  jointly as an auxiliary task and never runs at inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import Batch, N_SLOT_SPECIALS, SLOT_BOS_ID
from .errors import CalledAtInferenceError, ConfigError
from .numerics import DEBUG_FINITE, assert_finite, masked_softmax


@dataclass
class ModelConfig:
    """Architecture and loss-weight knobs (label-space sizes come from data)."""

    n_tokens: int
    n_intents: int
    n_slot_tags: int
    d_model: int = 128
    d_ff: int = 512
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 8
    dropout: float = 0.3
    rel_clip: int = 16
    lrm_layers: tuple[int, ...] = (2,)  # refine after these encoder layers
    use_lrm: bool = True
    share_lrm_classifier: bool = True
    lrm_hard_embed: bool = False  # argmax lookup instead of soft embedding
    alpha: float = 0.35  # consistency weight inside the auxiliary loss
    slg_weight: float = 0.75  # lambda: weight of the auxiliary loss

    def __post_init__(self):
        self.lrm_layers = tuple(sorted(set(int(k) for k in self.lrm_layers)))
        self.validate()

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        for k in self.lrm_layers:
            if not 1 <= k < self.n_enc_layers:
                raise ConfigError(
                    f"lrm_layers entry {k} outside [1, n_enc_layers)={self.n_enc_layers}"
                )
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"alpha={self.alpha} outside [0, 1)")
        if self.slg_weight < 0.0:
            raise ConfigError(f"lambda={self.slg_weight} must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.rel_clip < 0:
            raise ConfigError("rel_clip must be >= 0")
        if min(self.n_tokens, self.n_intents, self.n_slot_tags) < 1:
            raise ConfigError("label/vocabulary sizes must be >= 1")


@dataclass
class EncoderState:
    """Encoder output [B, 1+T, d_model] plus its padding mask."""

    hidden: torch.Tensor
    pad_mask: torch.Tensor | None


@dataclass
class Prediction:
    """Intent and per-token slot distributions with their argmax labels."""

    intent_logits: torch.Tensor  # [B, d_i]
    slot_logits: torch.Tensor  # [B, T, d_s]
    intent_log_probs: torch.Tensor
    slot_log_probs: torch.Tensor
    intent_probs: torch.Tensor
    slot_probs: torch.Tensor
    intent_argmax: torch.Tensor  # [B]
    slot_argmax: torch.Tensor  # [B, T]

    @classmethod
    def from_logits(cls, intent_logits: torch.Tensor, slot_logits: torch.Tensor) -> "Prediction":
        intent_lp = torch.log_softmax(intent_logits, dim=-1)
        slot_lp = torch.log_softmax(slot_logits, dim=-1)
        return cls(
            intent_logits=intent_logits,
            slot_logits=slot_logits,
            intent_log_probs=intent_lp,
            slot_log_probs=slot_lp,
            intent_probs=intent_lp.exp(),
            slot_probs=slot_lp.exp(),
            intent_argmax=intent_logits.argmax(dim=-1),
            slot_argmax=slot_logits.argmax(dim=-1),
        )


@dataclass
class SlgOutput:
    """Auxiliary decoder output: next-tag distribution per position."""

    logits: torch.Tensor  # [B, T, d_s]
    log_probs: torch.Tensor
    probs: torch.Tensor


@dataclass
class EncodeResult:
    state: EncoderState
    preliminary: Prediction | None  # from the first refinement, diagnostics
    final: Prediction


@lru_cache(maxsize=128)
def _relative_index(length: int, clip: int) -> torch.Tensor:
    """[L, L] table index for the clipped signed distance j - i. Read-only."""
    with torch.inference_mode(False):  # cached across grad/inference contexts
        pos = torch.arange(length)
        rel = pos[None, :] - pos[:, None]
        return rel.clamp_(-clip, clip).add_(clip)


@lru_cache(maxsize=128)
def _causal_mask(length: int) -> torch.Tensor:
    """[1, 1, L, L] boolean mask, True where key j <= query i. Read-only."""
    with torch.inference_mode(False):
        return torch.ones(length, length, dtype=torch.bool).tril_()[None, None]


class RelativeSelfAttention(nn.Module):
    """Multi-head self-attention with relative-position key/value terms.

    Score(i, j) = (q_i . k_j + q_i . r^K_{j-i}) / sqrt(d_head) and the value
    sum receives r^V_{j-i} alongside v_j; both tables are indexed by the
    signed distance clipped to +-rel_clip and shared across heads. With both
    tables zero this reduces exactly to vanilla scaled dot-product attention.
    """

    def __init__(self, d_model: int, n_heads: int, rel_clip: int, dropout: float, causal: bool):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.scale = self.head_dim ** -0.5
        self.rel_clip = rel_clip
        self.causal = causal
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.rel_key = nn.Parameter(torch.empty(2 * rel_clip + 1, self.head_dim))
        self.rel_value = nn.Parameter(torch.empty(2 * rel_clip + 1, self.head_dim))
        std = self.head_dim ** -0.5
        nn.init.normal_(self.rel_key, 0.0, std)
        nn.init.normal_(self.rel_value, 0.0, std)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, length, d = x.shape
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(x).view(b, length, h, hd).transpose(1, 2)
        k = self.k_proj(x).view(b, length, h, hd).transpose(1, 2)
        v = self.v_proj(x).view(b, length, h, hd).transpose(1, 2)

        idx = _relative_index(length, self.rel_clip)
        rel_k = self.rel_key[idx]  # [L, L, hd]
        scores = torch.matmul(q, k.transpose(-2, -1))
        scores = (scores + torch.einsum("bhid,ijd->bhij", q, rel_k)) * self.scale

        mask = None
        if self.causal:
            mask = _causal_mask(length)
            if pad_mask is not None:
                mask = mask & pad_mask[:, None, None, :]
        elif pad_mask is not None:
            mask = pad_mask[:, None, None, :]
        probs = masked_softmax(scores, mask, dim=-1)
        probs = self.drop(probs)

        ctx = torch.matmul(probs, v)
        ctx = ctx + torch.einsum("bhij,ijd->bhid", probs, self.rel_value[idx])
        return self.out_proj(ctx.transpose(1, 2).reshape(b, length, d))


class CrossAttention(nn.Module):
    """Standard multi-head attention from decoder positions into the encoder."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(
        self, x: torch.Tensor, memory: torch.Tensor, mem_mask: torch.Tensor | None
    ) -> torch.Tensor:
        b, length, d = x.shape
        src = memory.shape[1]
        h, hd = self.n_heads, self.head_dim
        q = self.q_proj(x).view(b, length, h, hd).transpose(1, 2)
        k = self.k_proj(memory).view(b, src, h, hd).transpose(1, 2)
        v = self.v_proj(memory).view(b, src, h, hd).transpose(1, 2)
        scores = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        mask = mem_mask[:, None, None, :] if mem_mask is not None else None
        probs = self.drop(masked_softmax(scores, mask, dim=-1))
        ctx = torch.matmul(probs, v)
        return self.out_proj(ctx.transpose(1, 2).reshape(b, length, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.inner = nn.Linear(d_model, d_ff)
        self.outer = nn.Linear(d_ff, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(F.relu(self.inner(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = RelativeSelfAttention(
            cfg.d_model, cfg.n_heads, cfg.rel_clip, cfg.dropout, causal=False
        )
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        x = self.norm1(x + self.drop(self.attn(x, pad_mask)))
        return self.norm2(x + self.drop(self.ff(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = RelativeSelfAttention(
            cfg.d_model, cfg.n_heads, cfg.rel_clip, cfg.dropout, causal=True
        )
        self.cross_attn = CrossAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self, x: torch.Tensor, memory: torch.Tensor, mem_mask: torch.Tensor | None
    ) -> torch.Tensor:
        x = self.norm1(x + self.drop(self.self_attn(x)))
        x = self.norm2(x + self.drop(self.cross_attn(x, memory, mem_mask)))
        return self.norm3(x + self.drop(self.ff(x)))


class SluClassifier(nn.Module):
    """Intent head on h_cls; slot head on the concatenation [h_j ; h_cls]."""

    def __init__(self, d_model: int, n_intents: int, n_slot_tags: int):
        super().__init__()
        self.d_model = d_model
        self.intent_head = nn.Linear(d_model, n_intents)
        self.slot_head = nn.Linear(2 * d_model, n_slot_tags)

    def forward(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        slot_head, intent_head = self.slot_head, self.intent_head
        w, d = slot_head.weight, self.d_model
        h_cls = hidden[:, 0]
        h_tok = hidden[:, 1:]
        # [h_j ; h_cls] @ W^T, with W split into its token and sentence halves
        # so the concatenation is never materialized.
        cls_part = F.linear(h_cls, w[:, d:])
        slot_logits = F.linear(h_tok, w[:, :d], slot_head.bias) + cls_part.unsqueeze(1)
        intent_logits = F.linear(h_cls, intent_head.weight, intent_head.bias)
        return intent_logits, slot_logits


class LayeredRefine(nn.Module):
    """Mid-encoder refinement from preliminary results.

    The running hidden states are classified, the resulting distributions are
    embedded as probability-weighted table rows, and the embeddings are added
    back: every token position receives its own slot-result embedding, and
    the sentence position receives the intent embedding plus a per-dimension
    softmax pool (over real token positions) of the slot embeddings. Padded
    positions pass through unchanged; with zero tables the whole step is the
    identity.
    """

    def __init__(self, d_model: int, n_intents: int, n_slot_tags: int, hard: bool = False):
        super().__init__()
        self.n_intents = n_intents
        self.intent_table = nn.Parameter(torch.empty(n_intents, d_model))
        self.slot_table = nn.Parameter(torch.empty(n_slot_tags, d_model))
        std = d_model ** -0.5
        nn.init.normal_(self.intent_table, 0.0, std)
        nn.init.normal_(self.slot_table, 0.0, std)
        self.hard = hard
        self._fused = None  # inference-path weight cache, see _fused_tensors
        # plain-tuple ref bypasses nn.Module attribute lookup in the guard
        self._tables = (self.intent_table, self.slot_table)

    def forward(
        self,
        hidden: torch.Tensor,
        pad_mask: torch.Tensor | None,
        classifier: SluClassifier,
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor]]:
        intent_table, slot_table = self.intent_table, self.slot_table
        intent_logits, slot_logits = classifier(hidden)
        if self.hard:
            e_intent = intent_table[intent_logits.argmax(dim=-1)]
            e_slot = slot_table[slot_logits.argmax(dim=-1)]
        else:
            e_intent = torch.softmax(intent_logits, dim=-1) @ intent_table
            e_slot = torch.softmax(slot_logits, dim=-1) @ slot_table

        tok_mask = pad_mask[:, 1:].unsqueeze(-1) if pad_mask is not None else None
        weights = masked_softmax(e_slot, tok_mask, dim=1)  # per dimension, over positions
        pooled = (weights * e_slot).sum(dim=1)
        if tok_mask is not None:
            e_slot = e_slot * tok_mask

        if torch.is_grad_enabled():
            new_cls = hidden[:, 0] + e_intent + pooled
            out = torch.cat([new_cls.unsqueeze(1), hidden[:, 1:] + e_slot], dim=1)
            return out, (intent_logits, slot_logits)
        # Inference: same arithmetic applied in place, keeping the layer's
        # buffer (cheaper, and downstream layers see an unchanged allocation
        # pattern).
        h_cls = hidden[:, 0]
        h_cls += e_intent
        h_cls += pooled
        hidden[:, 1:] += e_slot
        return hidden, (intent_logits, slot_logits)

    def _fast_tensors(self, classifier: SluClassifier):
        """Inference-path tensor views and reusable workspaces.

        The weight views alias the live parameters (strided slices and
        transposes of the classifier heads and this block's tables), so
        in-place updates are reflected automatically and no extra weight
        bytes enter the cache footprint. Rebuilt only when a parameter's
        storage is replaced (dtype/device moves, `.data` swaps).
        """
        fast = self._fused
        ws_w = classifier.slot_head.weight
        if fast is None or fast[0] is not ws_w or fast[1] != (ws_w.data_ptr(), ws_w.dtype):
            wi, bi = classifier.intent_head.weight, classifier.intent_head.bias
            bs = classifier.slot_head.bias
            ti, ts = self._tables
            d = ws_w.shape[1] // 2
            d_s, d_i = ws_w.shape[0], wi.shape[0]
            scratch = torch.empty(d_i + d_s + d, dtype=ws_w.dtype, device=ws_w.device)
            fast = (
                ws_w,
                (ws_w.data_ptr(), ws_w.dtype),
                (
                    ws_w[:, d:],  # [d_s, d] sentence half of the slot head
                    ws_w[:, :d].t(),  # [d, d_s] token half, transposed
                    bs,
                    wi,
                    bi,
                    ti.t(),  # [d, d_i]
                    ts,  # [d_s, d]
                    scratch[:d_i],
                    scratch[d_i : d_i + d_s],
                    scratch[d_i + d_s :],
                    {},  # per-length workspaces
                ),
            )
            self._fused = fast
        return fast[2]

    def infer_refine(self, hidden: torch.Tensor, classifier: SluClassifier):
        """Single-utterance (B=1, unpadded) inference path: identical
        arithmetic to forward(), flattened to 2-D ops with fused residual
        adds and reused workspaces, mutating `hidden` in place. Preliminary
        logits are not materialized here (use forward() for diagnostics)."""
        (
            w_cls, w_tok_t, slot_bias, w_int, int_bias,
            intent_table_t, slot_table, score_int, score_cls, pool_buf, wsmap,
        ) = self._fast_tensors(classifier)
        h = hidden[0]
        h_cls = h[0]
        h_tok = h[1:]
        length = h_tok.shape[0]
        ws = wsmap.get(length)
        if ws is None:
            d_s, d = slot_table.shape
            ws = (torch.empty(length, d_s, dtype=h.dtype), torch.empty(length, d, dtype=h.dtype),
                  torch.empty(length, d, dtype=h.dtype))
            wsmap[length] = ws
        ws_logits, ws_eslot, ws_prod = ws
        torch.addmv(slot_bias, w_cls, h_cls, out=score_cls)
        torch.addmv(int_bias, w_int, h_cls, out=score_int)
        slot_logits = torch.addmm(score_cls, h_tok, w_tok_t, out=ws_logits)
        e_slot = torch.mm(torch.softmax(slot_logits, dim=-1), slot_table, out=ws_eslot)
        h_cls.addmv_(intent_table_t, torch.softmax(score_int, dim=0))
        weights = torch.softmax(e_slot, dim=0)  # per dimension, over positions
        torch.mul(weights, e_slot, out=ws_prod)
        h_cls += torch.sum(ws_prod, dim=0, out=pool_buf)
        h_tok += e_slot
        return hidden, None


class SlotDecoder(nn.Module):
    """Causal tag decoder over the encoder output. Training-time only."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.n_slot_tags + N_SLOT_SPECIALS, cfg.d_model)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.out = nn.Linear(cfg.d_model, cfg.n_slot_tags)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(
        self,
        memory: torch.Tensor,
        mem_mask: torch.Tensor | None,
        input_ids: torch.Tensor,
    ) -> torch.Tensor:
        x = self.drop(self.embed(input_ids))
        for layer in self.layers:
            x = layer(x, memory, mem_mask)
        return self.out(x)


class SluTransformer(nn.Module):
    """Joint intent detection and slot filling in one parallel forward pass."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embed = nn.Embedding(cfg.n_tokens, cfg.d_model)
        self.embed_drop = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.classifier = SluClassifier(cfg.d_model, cfg.n_intents, cfg.n_slot_tags)
        if cfg.share_lrm_classifier:
            self.lrm_classifier = self.classifier
        else:
            self.lrm_classifier = SluClassifier(cfg.d_model, cfg.n_intents, cfg.n_slot_tags)
        self.refine = LayeredRefine(
            cfg.d_model, cfg.n_intents, cfg.n_slot_tags, hard=cfg.lrm_hard_embed
        )
        self.decoder = SlotDecoder(cfg)
        self._lrm_set = frozenset(cfg.lrm_layers)
        # plain tuple: skips nn.Module attribute lookups on the hot path
        self._fast_refine = (self.refine.infer_refine, self.lrm_classifier)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        # Glorot-uniform weights, zero biases, N(0, dim^-1/2) embedding-like
        # tables (token/tag embeddings, relative-position and result tables).
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, nn.Embedding):
                nn.init.normal_(m.weight, 0.0, m.embedding_dim ** -0.5)
            elif isinstance(m, RelativeSelfAttention):
                std = m.head_dim ** -0.5
                nn.init.normal_(m.rel_key, 0.0, std)
                nn.init.normal_(m.rel_value, 0.0, std)
            elif isinstance(m, LayeredRefine):
                std = m.intent_table.shape[1] ** -0.5
                nn.init.normal_(m.intent_table, 0.0, std)
                nn.init.normal_(m.slot_table, 0.0, std)

    def _encode_hidden(
        self, token_ids: torch.Tensor, pad_mask: torch.Tensor | None
    ) -> tuple[torch.Tensor, tuple[torch.Tensor, torch.Tensor] | None]:
        h = self.embed_drop(self.tok_embed(token_ids))
        prelim = None
        use_lrm = self.cfg.use_lrm
        single = (
            use_lrm
            and pad_mask is None
            and token_ids.shape[0] == 1
            and not self.refine.hard
            and not torch.is_grad_enabled()
        )
        for i, layer in enumerate(self.layers, start=1):
            h = layer(h, pad_mask)
            if DEBUG_FINITE:
                assert_finite(h, f"encoder layer {i}")
            if use_lrm and i in self._lrm_set:
                if single:
                    refine_fn, clf = self._fast_refine
                    h, logits = refine_fn(h, clf)
                else:
                    h, logits = self.refine(h, pad_mask, self.lrm_classifier)
                if DEBUG_FINITE:
                    assert_finite(h, f"refine after layer {i}")
                if prelim is None:
                    prelim = logits
        return h, prelim

    def encode(self, batch: Batch) -> EncodeResult:
        """Full encoder pass. Returns the encoder state, the preliminary
        refinement prediction (None when refinement is off) and the final
        prediction."""
        hidden, prelim_logits = self._encode_hidden(batch.token_ids, batch.pad_mask)
        final = Prediction.from_logits(*self.classifier(hidden))
        preliminary = (
            Prediction.from_logits(*prelim_logits) if prelim_logits is not None else None
        )
        return EncodeResult(EncoderState(hidden, batch.pad_mask), preliminary, final)

    def infer(
        self, token_ids: torch.Tensor, pad_mask: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Minimal inference path: embedding through classifier probabilities.

        Pass pad_mask=None for unpadded input (e.g. single utterances) to skip
        all masking work.
        """
        hidden, _ = self._encode_hidden(token_ids, pad_mask)
        intent_logits, slot_logits = self.classifier(hidden)
        return torch.softmax(intent_logits, dim=-1), torch.softmax(slot_logits, dim=-1)

    def slg_forward(self, state: EncoderState, gold_slot_ids: torch.Tensor) -> SlgOutput:
        """Teacher-forced auxiliary decoding of the gold tag sequence.

        Decoder input at step j is the gold tag j-1 (BOS at step 0) through
        the decoder's own tag-embedding table; output is the next-tag
        distribution over the d_s real tags. Raises CalledAtInferenceError
        outside training mode.
        """
        if not self.training:
            raise CalledAtInferenceError(
                "the auxiliary tag decoder only runs during training"
            )
        b = gold_slot_ids.shape[0]
        bos = torch.full((b, 1), SLOT_BOS_ID, dtype=torch.long)
        dec_in = torch.cat([bos, gold_slot_ids[:, :-1]], dim=1)
        logits = self.decoder(state.hidden, state.pad_mask, dec_in)
        if DEBUG_FINITE:
            assert_finite(logits, "decoder logits")
        log_probs = torch.log_softmax(logits, dim=-1)
        return SlgOutput(logits=logits, log_probs=log_probs, probs=log_probs.exp())
