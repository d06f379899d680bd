"""Shared test utilities: tiny models and a central finite-difference checker."""

import numpy as np

from promptmil import model as M

TINY = dict(n=6, d0=5, d=8, heads=2)


def tiny_setup(seed=0, beta=0.5, n=TINY["n"], d0=TINY["d0"], d=TINY["d"], heads=TINY["heads"]):
    rng = np.random.default_rng(seed)
    cfg = M.ModelConfig(d0=d0, d=d, heads=heads)
    params = M.init_params(cfg, rng, np.float64)
    # non-trivial LayerNorm/bias values so every tensor carries gradient signal
    for k, v in params.items():
        if v.ndim == 1 and k != "cls":
            params[k] = v + rng.normal(0, 0.1, size=v.shape)
    params["cls"] = rng.normal(0, 0.5, size=d)
    x = rng.normal(size=(n, d0))
    prompts = rng.normal(size=(4, d))
    return cfg, params, x, prompts, M.PipelineOptions(beta=beta)


def loss_and_grads(params, x, prompts, heads, opts, label=1):
    trace = M.forward(x, prompts, params, heads, opts, np.random.default_rng(0))
    loss = -np.log(trace.probs[label])
    grads, dx = M.backward(trace, params, M.cross_entropy_grad(trace.probs, label))
    return loss, grads, dx, trace


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-6))


def finite_difference_check(params, x, prompts, heads, opts, eps=1e-4, label=1):
    """Relative error per parameter tensor between analytic and central-difference gradients."""
    _, grads, _, base = loss_and_grads(params, x, prompts, heads, opts, label)
    members = [g.member_indices.tolist() for g in base.groups]
    errors = {}
    for name, value in params.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + eps
            up, _, _, tu = loss_and_grads(params, x, prompts, heads, opts, label)
            value[idx] = old - eps
            down, _, _, td = loss_and_grads(params, x, prompts, heads, opts, label)
            value[idx] = old
            for t in (tu, td):
                if [g.member_indices.tolist() for g in t.groups] != members:
                    raise AssertionError(f"group membership changed while perturbing {name}{idx}")
            num[idx] = (up - down) / (2 * eps)
        errors[name] = relative_error(grads[name], num)
    return errors


def planted_per_component(n, signal_fraction):
    """Planted instances per component, straight from the generator recipe."""
    planted = min(n, round(signal_fraction * n))
    return [len(range(c, planted, 4)) for c in range(4)]


def bayes_oracle_auc(ds):
    """AUC of the recipe-aware oracle: marker energy of the instances most similar
    (text channel) to component 0 minus that of component 1, as many as were planted."""
    axis = np.asarray(ds.truth["marker_axis"])
    comps = ds.prompts.by_role("component").matrix().astype(np.float64)
    frac = ds.truth["config"]["signal_fraction"]
    scores, labels = [], []
    for bag in ds.bags:
        text = bag.text.astype(np.float64)
        sim = (text / np.linalg.norm(text, axis=1, keepdims=True)) @ (comps / np.linalg.norm(comps, axis=1,
                                                                                               keepdims=True)).T
        marker = bag.instances.astype(np.float64) @ axis
        counts = planted_per_component(bag.n, frac)
        energy = [np.mean(marker[np.argsort(-sim[:, c], kind="stable")[:max(1, counts[c])]] ** 2) for c in (0, 1)]
        scores.append(energy[0] - energy[1])
        labels.append(bag.label)
    s = np.asarray(scores)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    # brute-force pairwise count, independent of the package's AUC kernels
    wins = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
    return float(wins / (len(pos) * len(neg)))
