"""Losses, the training loop, validation-based selection, checkpoint pairing.

The joint objective is the sum of (a) the one-pass loss: intent NLL plus the
per-utterance sum of token slot NLLs, averaged over the batch, and (b) the
auxiliary decoder loss weighted by lambda: a (1-alpha)/alpha mix of its
token-mean NLL against the gold tags and its token-mean cross entropy against
the one-pass branch's argmax tags (hard, gradient-stopped targets).
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from . import numerics
from .corpus import (
    Batch,
    Example,
    N_SLOT_SPECIALS,
    Vocabulary,
    encode_batch,
    encode_tokens,
    iter_epoch_batches,
    load_split,
)
from .errors import ConfigError, NonFiniteLossError, VocabMismatchError
from .evaluation import ErrorReport, classify_unc_errors, intent_accuracy, overall_accuracy, slot_f1
from .model import ModelConfig, Prediction, SlgOutput, SluTransformer
from .numerics import AdamState, adam_step, clip_grad_norm


def trainable_params(model: SluTransformer) -> dict[str, torch.Tensor]:
    """Parameters that actually receive gradient under the configuration:
    the refinement block drops out when it is bypassed, the auxiliary
    decoder when its loss weight is zero."""
    skip: set[str] = set()
    if not model.cfg.use_lrm:
        skip.update(n for n, _ in model.refine.named_parameters(prefix="refine"))
        if not model.cfg.share_lrm_classifier:
            skip.update(
                n for n, _ in model.lrm_classifier.named_parameters(prefix="lrm_classifier")
            )
    if model.cfg.slg_weight == 0.0:
        skip.update(n for n, _ in model.decoder.named_parameters(prefix="decoder"))
    return {
        name: p
        for name, p in model.named_parameters()
        if p.requires_grad and name not in skip
    }


# --- losses -----------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Float components of one step; total recomposes exactly from the parts."""

    l_slu: float
    l_slg_nll: float
    l_slg_consistency: float
    total: float

    @classmethod
    def make(cls, l_slu: float, nll: float, consistency: float, alpha: float, lam: float):
        return cls(l_slu, nll, consistency, l_slu + lam * ((1.0 - alpha) * nll + alpha * consistency))


def _gold_slot_targets(batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Gold tags in the classifier's index space, plus the real-token mask."""
    mask = batch.pad_mask[:, 1:]
    targets = (batch.slot_ids - N_SLOT_SPECIALS).clamp(min=0)  # pads masked anyway
    return targets, mask


def loss_slu(pred: Prediction, batch: Batch) -> torch.Tensor:
    """Intent NLL + per-utterance token-summed slot NLL, mean over the batch."""
    targets, mask = _gold_slot_targets(batch)
    intent_nll = -pred.intent_log_probs.gather(1, batch.intent_ids.unsqueeze(1)).squeeze(1)
    tok_nll = -pred.slot_log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    tok_nll = tok_nll * mask.to(tok_nll.dtype)
    return (intent_nll + tok_nll.sum(dim=1)).mean()


def loss_slg(
    slg: SlgOutput, batch: Batch, pred: Prediction
) -> tuple[torch.Tensor, torch.Tensor]:
    """(generation NLL, consistency CE), both token-mean over real positions.

    The consistency targets are the one-pass branch's argmax tags, detached:
    no gradient reaches that branch through this loss.
    """
    targets, mask = _gold_slot_targets(batch)
    fmask = mask.to(slg.log_probs.dtype)
    n_real = fmask.sum()
    nll = -(slg.log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1) * fmask).sum() / n_real
    hard = pred.slot_argmax.detach()
    consistency = (
        -(slg.log_probs.gather(-1, hard.unsqueeze(-1)).squeeze(-1) * fmask).sum() / n_real
    )
    return nll, consistency


def combine_slg(nll: torch.Tensor, consistency: torch.Tensor, alpha: float) -> torch.Tensor:
    return (1.0 - alpha) * nll + alpha * consistency


def total_loss(l_slu: torch.Tensor, l_slg: torch.Tensor, lam: float) -> torch.Tensor:
    return l_slu + lam * l_slg


# --- run configuration --------------------------------------------------------

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    s = s.strip()
    if not s:
        return ()
    return tuple(int(part) for part in s.replace(",", " ").split())


@dataclass
class RunSettings:
    """Everything configurable from a key=value file or --override flags.

    The architecture keys mirror ModelConfig; `lambda` is accepted as an
    alias for slg_weight, matching the usual name of that weight.
    """

    # architecture
    d_model: int = 128
    d_ff: int = 512
    n_enc_layers: int = 6
    n_dec_layers: int = 6
    n_heads: int = 8
    dropout: float = 0.3
    rel_clip: int = 16
    lrm_layers: tuple[int, ...] = (2,)
    use_lrm: bool = True
    share_lrm_classifier: bool = True
    lrm_hard_embed: bool = False
    alpha: float = 0.35
    slg_weight: float = 0.75
    # optimization
    max_epochs: int = 100
    batch_size: int = 32
    lr: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    max_len: int = 128
    eval_batch_size: int = 64
    seed: int = 0
    # paths (overridable by CLI flags)
    data_dir: str = ""
    out_dir: str = ""

    _ALIASES = {"lambda": "slg_weight"}

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunSettings":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for raw_key, raw_val in kv.items():
            key = cls._ALIASES.get(raw_key, raw_key)
            if key not in fields:
                raise ConfigError(f"unknown config key {raw_key!r}")
            typ = fields[key].type
            try:
                if typ == "bool":
                    values[key] = _parse_bool(raw_val)
                elif typ == "int":
                    values[key] = int(raw_val)
                elif typ == "float":
                    values[key] = float(raw_val)
                elif typ == "tuple[int, ...]":
                    values[key] = _parse_int_tuple(raw_val)
                else:
                    values[key] = raw_val
            except ValueError as exc:
                raise ConfigError(f"bad value for {raw_key!r}: {exc}") from None
        return cls(**values)

    @classmethod
    def from_sources(
        cls, config_path: str | Path | None = None, overrides: Sequence[str] = ()
    ) -> "RunSettings":
        """Merge a config file with key=value overrides (overrides win)."""
        kv: dict[str, str] = {}
        if config_path is not None:
            kv.update(parse_config_file(config_path))
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, val = item.split("=", 1)
            kv[key.strip()] = val.strip()
        return cls.from_mapping(kv)

    def model_config(self, vocab: Vocabulary) -> ModelConfig:
        return ModelConfig(
            n_tokens=vocab.n_tokens,
            n_intents=vocab.n_intents,
            n_slot_tags=vocab.n_slot_tags,
            d_model=self.d_model,
            d_ff=self.d_ff,
            n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers,
            n_heads=self.n_heads,
            dropout=self.dropout,
            rel_clip=self.rel_clip,
            lrm_layers=self.lrm_layers,
            use_lrm=self.use_lrm,
            share_lrm_classifier=self.share_lrm_classifier,
            lrm_hard_embed=self.lrm_hard_embed,
            alpha=self.alpha,
            slg_weight=self.slg_weight,
        )


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Read a `key = value` file; blank lines and #-comments are ignored."""
    kv: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    return kv


# --- prediction / evaluation over a corpus -----------------------------------


def predict(
    model: SluTransformer,
    examples: Sequence[Example],
    vocab: Vocabulary,
    batch_size: int = 64,
    max_len: int = 512,
) -> tuple[list[str], list[list[str]]]:
    """Argmax intents and tag sequences for a corpus, in corpus order.

    Only tokens are encoded, so corpora with out-of-vocabulary gold labels
    can still be scored (in tag-string space, where an unseen gold label is
    simply never matched).
    """
    model.eval()
    pred_intents: list[str] = []
    pred_tags: list[list[str]] = []
    with torch.inference_mode():
        for start in range(0, len(examples), batch_size):
            chunk = examples[start : start + batch_size]
            token_ids, pad_mask, _ = encode_tokens(chunk, vocab, max_len)
            intent_probs, slot_probs = model.infer(token_ids, pad_mask)
            intents = intent_probs.argmax(dim=-1)
            slots = slot_probs.argmax(dim=-1)
            for i, ex in enumerate(chunk):
                pred_intents.append(vocab.intent_label(int(intents[i])))
                pred_tags.append(
                    [vocab.model_slot_tag(int(s)) for s in slots[i, : len(ex)]]
                )
    return pred_intents, pred_tags


@dataclass
class EvalOutcome:
    intent_accuracy: float
    slot_precision: float
    slot_recall: float
    slot_f1: float
    overall_accuracy: float
    report: ErrorReport

    def metrics_dict(self) -> dict:
        return {
            "intent_accuracy": self.intent_accuracy,
            "slot_precision": self.slot_precision,
            "slot_recall": self.slot_recall,
            "slot_f1": self.slot_f1,
            "overall_accuracy": self.overall_accuracy,
            **self.report.to_dict(with_cases=False),
        }


def score_predictions(
    pred_intents: Sequence[str],
    pred_tags: Sequence[Sequence[str]],
    examples: Sequence[Example],
) -> EvalOutcome:
    gold_intents = [ex.intent for ex in examples]
    gold_tags = [list(ex.slot_labels) for ex in examples]
    precision, recall, f1 = slot_f1(pred_tags, gold_tags)
    return EvalOutcome(
        intent_accuracy=intent_accuracy(pred_intents, gold_intents),
        slot_precision=precision,
        slot_recall=recall,
        slot_f1=f1,
        overall_accuracy=overall_accuracy(pred_intents, pred_tags, gold_intents, gold_tags),
        report=classify_unc_errors(pred_tags, gold_tags),
    )


def evaluate_model(
    model: SluTransformer,
    examples: Sequence[Example],
    vocab: Vocabulary,
    batch_size: int = 64,
) -> EvalOutcome:
    pred_intents, pred_tags = predict(model, examples, vocab, batch_size)
    return score_predictions(pred_intents, pred_tags, examples)


# --- checkpoint pairing --------------------------------------------------------

VOCAB_FILE = "vocab.json"
METRICS_FILE = "metrics.jsonl"


def save_model(out_dir: str | Path, model: SluTransformer, vocab: Vocabulary) -> None:
    cfg = dataclasses.asdict(model.cfg)
    cfg["lrm_layers"] = list(cfg["lrm_layers"])
    numerics.save_checkpoint(
        out_dir,
        dict(model.named_parameters()),
        {"config": cfg, "vocab_sha256": vocab.sha256()},
    )


def load_model(model_dir: str | Path) -> tuple[SluTransformer, Vocabulary]:
    """Load a checkpoint directory, refusing mismatched vocab/checkpoint pairs."""
    model_dir = Path(model_dir)
    vocab = Vocabulary.load(model_dir / VOCAB_FILE)
    tensors, meta = numerics.load_checkpoint(model_dir)
    if meta.get("vocab_sha256") != vocab.sha256():
        raise VocabMismatchError(
            f"checkpoint in {model_dir} was trained with a different vocabulary"
        )
    cfg_dict = dict(meta["config"])
    cfg_dict["lrm_layers"] = tuple(cfg_dict.get("lrm_layers", ()))
    cfg = ModelConfig(**cfg_dict)
    model = SluTransformer(cfg)
    own = dict(model.named_parameters())
    if set(own) != set(tensors):
        raise VocabMismatchError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(tensors[name])
    return model, vocab


# --- training loop --------------------------------------------------------------


def train(settings: RunSettings, data_dir: str | Path, out_dir: str | Path) -> dict:
    """Train with validation-based selection; writes vocab, best checkpoint,
    and a JSON-lines metrics log under out_dir. Returns a summary dict."""
    data_dir = Path(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = numerics.seed_all(settings.seed)
    train_examples = load_split(data_dir, "train")
    valid_examples = load_split(data_dir, "valid")
    vocab = Vocabulary.build(train_examples)
    vocab.save(out_dir / VOCAB_FILE)

    model = SluTransformer(settings.model_config(vocab))
    params = trainable_params(model)
    opt_state = AdamState.initial(params)

    log_path = out_dir / METRICS_FILE
    best_key: tuple[float, float] | None = None
    best_epoch = 0
    t_start = time.perf_counter()

    with log_path.open("w", encoding="utf-8") as log:
        for epoch in range(1, settings.max_epochs + 1):
            model.train()
            sums = {"l_slu": 0.0, "l_slg_nll": 0.0, "l_slg_consistency": 0.0, "total": 0.0}
            n_steps = 0
            for step, chunk in enumerate(
                iter_epoch_batches(train_examples, settings.batch_size, rng)
            ):
                batch = encode_batch(chunk, vocab, settings.max_len)
                result = model.encode(batch)
                l_slu = loss_slu(result.final, batch)
                if settings.slg_weight > 0.0:
                    slg = model.slg_forward(result.state, batch.slot_ids)
                    nll, consistency = loss_slg(slg, batch, result.final)
                else:
                    nll = consistency = torch.zeros((), dtype=l_slu.dtype)
                loss = total_loss(l_slu, combine_slg(nll, consistency, settings.alpha),
                                  settings.slg_weight)
                if not bool(torch.isfinite(loss.detach())):
                    raise NonFiniteLossError(
                        epoch, step,
                        f"l_slu={l_slu.item()} nll={nll.item()} cons={consistency.item()}",
                    )
                loss.backward()
                clip_grad_norm(params, settings.grad_clip)
                adam_step(
                    params, opt_state, settings.lr,
                    settings.adam_beta1, settings.adam_beta2, settings.adam_eps,
                )
                breakdown = LossBreakdown.make(
                    l_slu.item(), nll.item(), consistency.item(),
                    settings.alpha, settings.slg_weight,
                )
                sums["l_slu"] += breakdown.l_slu
                sums["l_slg_nll"] += breakdown.l_slg_nll
                sums["l_slg_consistency"] += breakdown.l_slg_consistency
                sums["total"] += breakdown.total
                n_steps += 1

            outcome = evaluate_model(model, valid_examples, vocab, settings.eval_batch_size)
            key = (outcome.overall_accuracy, outcome.slot_f1)
            is_best = best_key is None or key > best_key
            if is_best:
                best_key = key
                best_epoch = epoch
                save_model(out_dir, model, vocab)
            line = {
                "epoch": epoch,
                "train": {k: v / max(n_steps, 1) for k, v in sums.items()},
                "val": outcome.metrics_dict(),
                "best": is_best,
            }
            log.write(json.dumps(line, ensure_ascii=False) + "\n")
            log.flush()

    return {
        "epochs_run": settings.max_epochs,
        "best_epoch": best_epoch,
        "best_val_overall_accuracy": best_key[0] if best_key else 0.0,
        "best_val_slot_f1": best_key[1] if best_key else 0.0,
        "seconds": time.perf_counter() - t_start,
        "out_dir": str(out_dir),
    }
