"""Selective fine-tuning: gradient descent on the noise-prediction loss
restricted to cross-attention key/value projections plus modifier-token
embeddings, the fine-tune-all baseline, joint and sequential multi-concept
training, and base-model pretraining."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as datamod
from . import denoiser, diffusion, textmod
from .denoiser import ROLE_CROSS_KEY, ROLE_CROSS_VALUE
from .errors import DivergenceError, InvalidInput, NumericalFailure

SCOPE_KV_ONLY = "kv_only"
SCOPE_ALL = "all_unet"


@dataclass
class FineTuneConfig:
    steps: int = 250
    learning_rate: float = 1e-3
    batch: int = 8
    trainable_scope: str = SCOPE_KV_ONLY
    use_reg: str = "retrieved"          # retrieved | generated | none
    use_aug: bool = True
    seed: int = 0
    train_modifier: bool = True         # off reproduces the no-modifier-optimization ablation
    cond_dropout: float = 0.0
    w_t: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise InvalidInput("steps must be >= 0")
        if self.learning_rate <= 0:
            raise InvalidInput("learning_rate must be positive")
        if self.batch < 1:
            raise InvalidInput("batch must be >= 1")
        if self.trainable_scope not in (SCOPE_KV_ONLY, SCOPE_ALL):
            raise InvalidInput(f"unknown scope {self.trainable_scope!r}")
        if self.use_reg not in ("retrieved", "generated", "none"):
            raise InvalidInput(f"unknown use_reg {self.use_reg!r}")

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls(**json.load(fh))


@dataclass
class TrainReport:
    loss_curve: np.ndarray
    final_params: denoiser.ParamRegistry
    modifier_embeddings: list
    model: denoiser.DenoiserNet = field(default=None, repr=False)


def trainable_set(model, scope):
    """Registry keys updated under the given scope. Modifier embeddings are
    handled separately from the registry."""
    if scope == SCOPE_ALL:
        return set(model.params.keys())
    if scope == SCOPE_KV_ONLY:
        return {k for k in model.params if k.role in (ROLE_CROSS_KEY, ROLE_CROSS_VALUE)}
    raise InvalidInput(f"unknown scope {scope!r}")


def sgd_step(params, grads, lr):
    """p <- p - lr * g for every key present in grads. Pure: returns new dict."""
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            out[k] = p.copy()
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient for {k}")
        out[k] = p - lr * g
    return out


def batch_gradients(model, examples, sched, rng, w_t=1.0, modifier_indices=(),
                    cond_dropout=0.0, uncond_caption=""):
    """Average loss and gradients over a batch of (image, caption, mask) draws.

    examples: iterable of (AugmentedSample-or-ConceptExample). Returns
    (loss, grads, emb_grads) where emb_grads maps modifier token index to the
    gradient of its embedding row. Summation order is fixed for determinism.
    """
    vocab = model.vocab
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    emb_grads = {i: np.zeros(vocab.dim) for i in modifier_indices}
    total_loss = 0.0
    n = 0
    for ex in examples:
        image = ex.image
        caption = ex.caption
        mask = getattr(ex, "valid_mask", None)
        if cond_dropout > 0.0 and rng.random() < cond_dropout:
            caption = uncond_caption
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(image.shape)
        noisy = diffusion.forward_noise(image, t, eps, sched)
        seq = textmod.tokenize(vocab, caption)
        c = textmod.encode_caption(vocab, seq)
        eps_pred, cache, _ = denoiser.forward(model, noisy.x_t, t, c)
        if mask is None:
            loss = diffusion.simple_loss(eps, eps_pred, w_t)
            d_pred = -2.0 * w_t * (eps - eps_pred) / eps.size
        else:
            loss = diffusion.masked_loss(eps, eps_pred, mask, w_t)
            d_pred = -2.0 * w_t * mask * (eps - eps_pred) / mask.sum()
        g, d_c = denoiser.backward(model, cache, d_pred)
        for k in grads:
            grads[k] += g[k]
        # Only registered trainable rows receive embedding gradient; the
        # start token and the rest of the table stay frozen.
        for pos, tok in enumerate(seq):
            if tok in emb_grads:
                emb_grads[tok] += d_c[pos]
        total_loss += loss
        n += 1
    if n == 0:
        raise InvalidInput("empty batch")
    for k in grads:
        grads[k] /= n
    for k in emb_grads:
        emb_grads[k] /= n
    return total_loss / n, grads, emb_grads


def _train(model, example_stream, cfg, sched, trainable, modifier_indices, rng,
           augment_flags=None):
    loss_curve = []
    initial_loss = None
    for _ in range(cfg.steps):
        raw = next(example_stream)
        batch = []
        for ex, is_target in raw:
            if cfg.use_aug and is_target:
                batch.append(datamod.augment(ex, rng))
            else:
                batch.append(ex)
        loss, grads, emb_grads = batch_gradients(
            model, batch, sched, rng, w_t=cfg.w_t,
            modifier_indices=modifier_indices if cfg.train_modifier else (),
            cond_dropout=cfg.cond_dropout)
        masked = {k: grads[k] for k in trainable}
        updated = sgd_step({k: model.params[k] for k in trainable}, masked,
                           cfg.learning_rate)
        for k, v in updated.items():
            model.params[k] = v
        if cfg.train_modifier:
            for idx, g in emb_grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericalFailure(f"non-finite modifier gradient (token {idx})")
                model.vocab.embeddings[idx] -= cfg.learning_rate * g
        loss_curve.append(loss)
        if initial_loss is None:
            initial_loss = max(loss, 1e-12)
        if not np.isfinite(loss) or loss > 1e3 * initial_loss:
            raise DivergenceError(f"loss {loss:.3g} diverged from initial {initial_loss:.3g}")
    return np.asarray(loss_curve)


def finetune(model, concepts, cfg, reg=None, sched=None):
    """Fine-tune on one or more concepts (joint training when len > 1).

    concepts: list of (examples, ModifierToken-or-None). Modifier tokens must
    already be registered in the model vocabulary and be distinct. Only the
    scope's registry entries and modifier embeddings change.
    """
    mods = [m for _, m in concepts if m is not None]
    if len({m.name for m in mods}) != len(mods):
        raise InvalidInput("concepts must use distinct modifier tokens")
    for examples, _ in concepts:
        if not examples:
            raise InvalidInput("each concept needs at least one example")
    tuned = model.clone()
    rng = np.random.default_rng(cfg.seed)
    trainable = trainable_set(tuned, cfg.trainable_scope)
    modifier_indices = tuple(m.token_index for m in mods)
    targets = [ex for examples, _ in concepts for ex in examples]
    reg_set = reg if cfg.use_reg != "none" else None
    stream = datamod.balanced_batches(targets, reg_set, cfg.batch, rng)
    sched = sched or diffusion.NoiseSchedule.linear()
    curve = _train(tuned, stream, cfg, sched, trainable, modifier_indices, rng)
    report = TrainReport(
        loss_curve=curve,
        final_params=tuned.params,
        modifier_embeddings=[(m.name, tuned.vocab.embeddings[m.token_index].copy())
                             for m in mods],
        model=tuned)
    return report


def finetune_sequential(model, concept_a, concept_b, cfg, reg=None, sched=None):
    """Train on concept_a, then continue from the result on concept_b."""
    rep_a = finetune(model, [concept_a], cfg, reg, sched)
    rep_b = finetune(rep_a.model, [concept_b], cfg, reg, sched)
    mods = {name: emb for name, emb in rep_a.modifier_embeddings}
    mods.update(dict(rep_b.modifier_embeddings))
    # concept_a's embedding may have drifted if still trainable in stage two
    final_mods = [(name, rep_b.model.vocab.embeddings[
        rep_b.model.vocab.index(name)].copy()) for name in mods]
    return TrainReport(
        loss_curve=np.concatenate([rep_a.loss_curve, rep_b.loss_curve]),
        final_params=rep_b.final_params,
        modifier_embeddings=final_mods,
        model=rep_b.model)


def pretrain(vocab, dataset, model_cfg=None, sched=None, steps=2000, learning_rate=1e-2,
             batch=8, seed=0, cond_dropout=0.1, init_seed=0):
    """Train a base model from scratch on a captioned dataset, with caption
    dropout so classifier-free guidance has a meaningful unconditional branch."""
    sched = sched or diffusion.NoiseSchedule.linear()
    model = denoiser.build_model(model_cfg, seed=init_seed, vocab=vocab.clone())
    cfg = FineTuneConfig(steps=steps, learning_rate=learning_rate, batch=batch,
                         trainable_scope=SCOPE_ALL, use_reg="none", use_aug=False,
                         seed=seed, train_modifier=False, cond_dropout=cond_dropout)
    rng = np.random.default_rng(seed)
    stream = datamod.balanced_batches(dataset, None, batch, rng)
    curve = _train(model, stream, cfg, sched, trainable_set(model, SCOPE_ALL), (), rng)
    return model, curve
