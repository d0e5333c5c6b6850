"""Concept datasets, regularization-set construction, resize augmentation,
and balanced target/regularization batch streams."""

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffusion, textmod
from .errors import EmptyRegularizationSetWarning, InvalidInput


@dataclass
class ConceptExample:
    image: np.ndarray      # (H, W), values in [-1, 1]
    caption: str


@dataclass
class RegularizationSet:
    examples: list
    source: str            # "retrieved" | "generated"
    target_caption: str = ""


@dataclass
class AugmentedSample:
    image: np.ndarray
    caption: str
    valid_mask: np.ndarray
    ratio: float


def load_dataset(path):
    with open(path) as fh:
        rows = json.load(fh)
    out = []
    for row in rows:
        img = np.asarray(row["pixels"], dtype=np.float64).reshape(row["height"], row["width"])
        out.append(ConceptExample(image=img, caption=row["caption"]))
    return out


def save_dataset(examples, path):
    rows = [{"caption": ex.caption, "width": ex.image.shape[1], "height": ex.image.shape[0],
             "pixels": [float(v) for v in ex.image.reshape(-1)]} for ex in examples]
    with open(path, "w") as fh:
        json.dump(rows, fh)


def retrieve_regularization(pool, target_caption, threshold, cap, text_featurizer):
    """Keep pool entries whose caption feature has cosine similarity >= threshold
    to the target caption, top-`cap` by descending similarity."""
    if not 0.0 <= threshold <= 1.0:
        raise InvalidInput("threshold must lie in [0, 1]")
    target = np.asarray(text_featurizer(target_caption), dtype=np.float64)
    target = target / max(np.linalg.norm(target), 1e-300)
    scored = []
    for i, ex in enumerate(pool):
        feat = np.asarray(text_featurizer(ex.caption), dtype=np.float64)
        feat = feat / max(np.linalg.norm(feat), 1e-300)
        sim = float(feat @ target)
        if sim >= threshold:
            scored.append((-sim, i, ex))
    scored.sort(key=lambda t: (t[0], t[1]))
    kept = [ex for _, _, ex in scored[:cap]]
    if not kept:
        warnings.warn("no pool caption cleared the similarity threshold",
                      EmptyRegularizationSetWarning)
    return RegularizationSet(examples=kept, source="retrieved", target_caption=target_caption)


def generate_regularization(model, category, count, seed, sched, steps=None, scale=6.0):
    """Sample `count` regularization images from the pretrained model with the
    bare-category prompt."""
    prompt = textmod.template_prompt(category)
    vocab = model.vocab
    cond = textmod.encode_caption(vocab, textmod.tokenize(vocab, prompt))
    uncond = textmod.encode_caption(vocab, textmod.tokenize(vocab, ""))
    steps = steps or sched.T
    examples = []
    for i in range(count):
        img = diffusion.sample_cfg(model, cond, steps, scale, seed + i, sched, uncond=uncond)
        examples.append(ConceptExample(image=img, caption=prompt))
    return RegularizationSet(examples=examples, source="generated", target_caption=prompt)


def _nearest_resize(image, new_h, new_w):
    h, w = image.shape
    ri = np.floor(np.arange(new_h) * h / new_h).astype(int)
    ci = np.floor(np.arange(new_w) * w / new_w).astype(int)
    return image[np.ix_(ri, ci)]


def augment(sample, rng, ratio=None, canvas_value=0.0):
    """Random resize augmentation.

    1/3 of the time the image is up-scaled by 1.2-1.4x and center-cropped
    (caption suffixed "zoomed in"/"close up"); otherwise it is down-scaled by
    0.4-1.0x and pasted centered on a neutral canvas, with "far away"/"very
    small" appended when the ratio drops below 0.6. The valid mask marks
    exactly the pasted pixels. Pass `ratio` to force a specific scale.
    """
    h, w = sample.image.shape
    if ratio is None:
        if rng.random() < 1.0 / 3.0:
            ratio = float(rng.uniform(1.2, 1.4))
        else:
            ratio = float(rng.uniform(0.4, 1.0))
    caption = sample.caption
    if ratio > 1.0:
        new_h, new_w = int(round(ratio * h)), int(round(ratio * w))
        big = _nearest_resize(sample.image, new_h, new_w)
        top, left = (new_h - h) // 2, (new_w - w) // 2
        image = big[top:top + h, left:left + w]
        mask = np.ones((h, w))
        suffix = ("zoomed in", "close up")[int(rng.integers(2))]
        caption = f"{caption} {suffix}"
    elif ratio < 1.0:
        new_h, new_w = max(int(round(ratio * h)), 1), max(int(round(ratio * w)), 1)
        small = _nearest_resize(sample.image, new_h, new_w)
        image = np.full((h, w), canvas_value)
        mask = np.zeros((h, w))
        top, left = (h - new_h) // 2, (w - new_w) // 2
        image[top:top + new_h, left:left + new_w] = small
        mask[top:top + new_h, left:left + new_w] = 1.0
        if ratio < 0.6:
            suffix = ("far away", "very small")[int(rng.integers(2))]
            caption = f"{caption} {suffix}"
    else:
        image = sample.image.copy()
        mask = np.ones((h, w))
    return AugmentedSample(image=image, caption=caption, valid_mask=mask, ratio=ratio)


def balanced_batches(targets, reg, batch, rng):
    """Infinite stream of half-target / half-regularization batches.

    Targets are oversampled with replacement. With an empty regularization
    set the batches are all-target (the w/o-reg ablation).
    """
    if batch < 2:
        raise InvalidInput("batch must be >= 2")
    reg_examples = reg.examples if reg is not None else []
    if not targets and not reg_examples:
        raise InvalidInput("both target and regularization sets are empty")
    while True:
        if reg_examples and targets:
            n_t = (batch + 1) // 2
            n_r = batch - n_t
        elif targets:
            n_t, n_r = batch, 0
        else:
            n_t, n_r = 0, batch
        out = []
        for _ in range(n_t):
            out.append((targets[int(rng.integers(len(targets)))], True))
        for _ in range(n_r):
            out.append((reg_examples[int(rng.integers(len(reg_examples)))], False))
        yield out
