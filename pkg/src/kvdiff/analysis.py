"""Per-layer weight-change rates and low-rank compression of K/V deltas."""

from dataclasses import dataclass, field

import numpy as np

from . import textmod
from .denoiser import CROSS_ROLES, ROLE_CROSS_KEY, ROLE_CROSS_VALUE, ROLE_SELF
from .errors import InvalidInput
from .linalg import frobenius_norm, thin_svd

GROUP_CROSS = "cross_attention"
GROUP_SELF = "self_attention"
GROUP_OTHER = "other"


def _group_of(role):
    if role in CROSS_ROLES:
        return GROUP_CROSS
    if role == ROLE_SELF:
        return GROUP_SELF
    return GROUP_OTHER


@dataclass
class DeltaEntry:
    """Dense difference matrix or its truncated SVD factors."""
    dense: np.ndarray = None
    u: np.ndarray = None
    sigma: np.ndarray = None
    vt: np.ndarray = None
    shape: tuple = None
    residual: float = 0.0      # Frobenius error dropped at compression time

    @property
    def is_dense(self):
        return self.dense is not None


def reconstruct_entry(entry):
    if entry.is_dense:
        return entry.dense
    if entry.sigma is None or entry.sigma.size == 0:
        return np.zeros(entry.shape)
    return (entry.u * entry.sigma) @ entry.vt


@dataclass
class DeltaCheckpoint:
    entries: dict                      # (layer, role) -> DeltaEntry, kv roles only
    modifier_embeddings: list          # [(name, vector)]
    energy_kept: float = 1.0
    config: object = None              # ModelConfig of the producing model

    def clone(self):
        out = {}
        for k, e in self.entries.items():
            out[k] = DeltaEntry(
                dense=None if e.dense is None else e.dense.copy(),
                u=None if e.u is None else e.u.copy(),
                sigma=None if e.sigma is None else e.sigma.copy(),
                vt=None if e.vt is None else e.vt.copy(),
                shape=e.shape, residual=e.residual)
        return DeltaCheckpoint(entries=out,
                               modifier_embeddings=[(n, v.copy()) for n, v in
                                                    self.modifier_embeddings],
                               energy_kept=self.energy_kept, config=self.config)


@dataclass
class ChangeReport:
    per_key: dict                      # ParamKey -> relative change
    zero_norm_keys: list
    group_means: dict
    group_fractions: dict


def delta_rate(base, tuned):
    """Relative weight change |theta' - theta| / |theta| per registry key,
    plus group means and parameter-count fractions."""
    if set(base.keys()) != set(tuned.keys()):
        raise InvalidInput("registries have different key sets")
    per_key = {}
    zero_norm = []
    group_sums = {GROUP_CROSS: 0.0, GROUP_SELF: 0.0, GROUP_OTHER: 0.0}
    group_counts = {GROUP_CROSS: 0, GROUP_SELF: 0, GROUP_OTHER: 0}
    group_params = {GROUP_CROSS: 0, GROUP_SELF: 0, GROUP_OTHER: 0}
    for key in sorted(base.keys()):
        if base[key].shape != tuned[key].shape:
            raise InvalidInput(f"shape mismatch at {key}")
        denom = frobenius_norm(base[key])
        if denom == 0.0:
            rate = 0.0
            zero_norm.append(key)
        else:
            rate = frobenius_norm(tuned[key] - base[key]) / denom
        per_key[key] = rate
        grp = _group_of(key.role)
        group_sums[grp] += rate
        group_counts[grp] += 1
        group_params[grp] += base[key].size
    means = {g: (group_sums[g] / group_counts[g] if group_counts[g] else 0.0)
             for g in group_sums}
    total = sum(group_params.values())
    fractions = {g: group_params[g] / total for g in group_params}
    return ChangeReport(per_key=per_key, zero_norm_keys=zero_norm,
                        group_means=means, group_fractions=fractions)


def extract_delta(base, tuned):
    """Dense K/V delta plus modifier embeddings present only in the tuned vocab."""
    entries = {}
    for key in base.params.sorted_keys():
        if key.role in (ROLE_CROSS_KEY, ROLE_CROSS_VALUE):
            diff = tuned.params[key] - base.params[key]
            entries[(key.layer, key.role)] = DeltaEntry(dense=diff, shape=diff.shape)
    mods = []
    for name, mod in sorted(tuned.vocab.modifiers.items()):
        mods.append((name, tuned.vocab.embeddings[mod.token_index].copy()))
    return DeltaCheckpoint(entries=entries, modifier_embeddings=mods,
                           energy_kept=1.0, config=base.config)


def compress_delta(delta, energy):
    """Truncate each dense entry to the smallest rank whose cumulative singular
    value sum reaches the requested energy fraction. Modifier embeddings are
    never compressed. energy = 1.0 keeps the dense matrices untouched so a
    full-energy round trip is bit-exact."""
    if not 0.0 < energy <= 1.0:
        raise InvalidInput("energy must lie in (0, 1]")
    out = {}
    for key, entry in delta.entries.items():
        dense = reconstruct_entry(entry) if not entry.is_dense else entry.dense
        if energy >= 1.0:
            out[key] = DeltaEntry(dense=dense.copy(), shape=dense.shape, residual=0.0)
            continue
        svd = thin_svd(dense)
        total = float(svd.sigma.sum())
        if total == 0.0:
            out[key] = DeltaEntry(u=np.zeros((dense.shape[0], 0)), sigma=np.zeros(0),
                                  vt=np.zeros((0, dense.shape[1])), shape=dense.shape,
                                  residual=0.0)
            continue
        frac = np.cumsum(svd.sigma) / total
        r = int(np.searchsorted(frac, energy - 1e-12) + 1)
        r = min(r, int(np.count_nonzero(svd.sigma)))
        residual = float(np.sqrt(np.sum(svd.sigma[r:] ** 2)))
        out[key] = DeltaEntry(u=svd.u[:, :r].copy(), sigma=svd.sigma[:r].copy(),
                              vt=svd.vt[:r].copy(), shape=dense.shape, residual=residual)
    return DeltaCheckpoint(entries=out,
                           modifier_embeddings=[(n, v.copy()) for n, v in
                                                delta.modifier_embeddings],
                           energy_kept=energy, config=delta.config)


def apply_delta(base, delta):
    """base + reconstructed delta on the K/V entries; modifier tokens registered."""
    if delta.config is not None and delta.config != base.config:
        raise InvalidInput("delta architecture does not match base model")
    model = base.clone()
    for (layer, role), entry in delta.entries.items():
        key = next((k for k in base.params if k.layer == layer and k.role == role), None)
        if key is None:
            raise InvalidInput(f"no registry entry for layer {layer} role {role}")
        rec = reconstruct_entry(entry)
        if rec.shape != base.params[key].shape:
            raise InvalidInput(f"delta shape mismatch at {key}")
        model.params[key] = base.params[key] + rec
    for name, emb in delta.modifier_embeddings:
        textmod.register_modifier_with_embedding(model.vocab, name, emb)
    return model


def spectrum(delta):
    """Descending singular values per (layer, role)."""
    out = {}
    for key, entry in sorted(delta.entries.items()):
        if entry.is_dense:
            out[key] = thin_svd(entry.dense).sigma.copy()
        else:
            out[key] = entry.sigma.copy()
    return out
