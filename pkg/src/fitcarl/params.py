"""Named parameter collection for the whole model."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .numeric import Tensor, get_dtype, rng_stream


class ModelParams(OrderedDict):
    """Ordered ``name -> Tensor`` map. Iteration order is the canonical order."""

    @property
    def d(self) -> int:
        return self["ent"].shape[1]

    @property
    def n_heads(self) -> int:
        return self["enc.l0.pos"].shape[0]

    @property
    def n_layers(self) -> int:
        return sum(1 for k in self if k.endswith(".wq"))

    def tensors(self) -> list[Tensor]:
        return list(self.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], order=None) -> "ModelParams":
        keys = order if order is not None else list(arrays)
        return cls((k, Tensor(np.array(arrays[k]), requires_grad=True, name=k)) for k in keys)


def init_params(n_entities: int, n_relations: int, d: int = 100, seed: int = 0, n_heads: int = 2,
                n_layers: int = 2, embedding=None) -> ModelParams:
    """Seeded initialization; ``embedding`` (a ComplexEmbedding) replaces the entity/relation tables."""
    if d % n_heads:
        raise ValueError(f"d={d} is not divisible by {n_heads} heads")
    rng = rng_stream(seed, "params/init")
    dtype = get_dtype()
    p = ModelParams()

    def add(name, arr):
        p[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    def dense(out, inp):
        return rng.normal(0.0, 1.0 / np.sqrt(inp), (out, inp))

    if embedding is not None:
        if embedding.entity.shape != (n_entities, d) or embedding.relation.shape != (n_relations, d):
            raise ValueError(f"embedding shapes {embedding.entity.shape}/{embedding.relation.shape} "
                             f"do not match ({n_entities}, {d})/({n_relations}, {d})")
        add("ent", embedding.entity.copy())
        add("rel", embedding.relation.copy())
    else:
        add("ent", rng.normal(0.0, 0.1, (n_entities, d)))
        add("rel", rng.normal(0.0, 0.1, (n_relations, d)))
    add("rel_dummy", rng.normal(0.0, 0.1, d))
    add("time.omega", 1.0 / 10.0 ** np.linspace(0.0, 9.0, d))
    add("time.phi", np.zeros(d))

    add("enc.meta_w", dense(d, 2 * d))
    add("enc.meta_b", np.zeros(d))
    add("enc.cls", rng.normal(0.0, 0.1, d))
    for i in range(n_layers):
        pre = f"enc.l{i}."
        for w in ("wq", "wk", "wv", "wo"):
            add(pre + w, dense(d, d))
        add(pre + "bo", np.zeros(d))
        add(pre + "pos", rng.normal(0.0, 0.1, (n_heads, d)))
        add(pre + "ln1_g", np.ones(d))
        add(pre + "ln1_b", np.zeros(d))
        add(pre + "ff1_w", dense(2 * d, d))
        add(pre + "ff1_b", np.zeros(2 * d))
        add(pre + "ff2_w", dense(d, 2 * d))
        add(pre + "ff2_b", np.zeros(d))
        add(pre + "ln2_g", np.ones(d))
        add(pre + "ln2_b", np.zeros(d))

    h = 3 * d
    add("gru.w_ih", dense(3 * h, h))
    add("gru.w_hh", dense(3 * h, h))
    add("gru.b_ih", np.zeros(3 * h))
    add("gru.b_hh", np.zeros(3 * h))
    add("w1", dense(2 * d, 3 * d))
    add("w2", dense(2 * d, 3 * d))
    add("w3", dense(2 * d, 3 * d))
    add("w4", dense(2 * d, 2 * d))
    add("core", rng.normal(0.0, 1.0 / np.sqrt(2 * d * d), (2 * d, d, 2 * d)))
    add("w_dt", rng.normal(0.0, 0.1, d))
    return p
