"""Shared test utilities: finite-difference gradient oracle and tiny fixtures."""

import numpy as np

from heartlang import tensor as T

# acceptance verdicts (criterion number -> one printable line), echoed in the terminal summary
VERDICTS: dict = {}


def verdict(number: int, title: str, ok: bool, detail: str):
    VERDICTS[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    print(VERDICTS[number])
    assert ok, VERDICTS[number]


def gradcheck(loss_fn, params, rng, per_group=6, eps=1e-5, floor=1e-7):
    """Compare analytic gradients with central differences on sampled coordinates.

    ``loss_fn`` rebuilds the scalar loss from ``params`` (name -> Tensor, float64).
    Discrete choices and stop-gradient values recorded on the first pass are
    replayed during the perturbed evaluations. Returns ``(rel_errors, names)``.
    """
    for p in params.values():
        p.zero_grad()
        p.requires_grad = True
    with T.frozen_constants() as session:
        loss = loss_fn()
    loss.backward()
    errors, names = [], []
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(per_group, flat.size), replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            with T.frozen_constants(session):
                up = loss_fn().item()
            flat[i] = old - eps
            with T.frozen_constants(session):
                down = loss_fn().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            ana = g.reshape(-1)[i]
            errors.append(abs(ana - num) / max(abs(ana), abs(num), floor))
            names.append(name)
    return np.asarray(errors), names


def check_leaf(fn, *arrays, rng=None, tol=1e-6):
    """Gradcheck a small op on float64 leaves, projected to a scalar by random weights."""
    rng = rng or np.random.default_rng(0)
    leaves = {f"x{i}": T.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for i, a in enumerate(arrays)}
    out_shape = fn(*leaves.values()).shape
    w = T.Tensor(rng.standard_normal(out_shape))
    errs, _ = gradcheck(lambda: T.sum_(T.mul(fn(*leaves.values()), w)), leaves, rng, per_group=10)
    assert errs.max() < tol, errs.max()


def tiny_corpus(n=16, l=24, seed=0, leads=("I", "II")):
    """Small labelled corpus from the synthetic generator, two leads, short sentences."""
    from heartlang.storage import corpus_from_sentences
    from heartlang.synthetic import CLASS_NAMES, SynthConfig, generate_corpus
    from heartlang.tokenizer import TokenizerConfig, tokenize

    recs = generate_corpus(SynthConfig(n_records=n), seed)
    cfg = TokenizerConfig(l=l, leads=leads)
    sents = [tokenize(r.record, cfg) for r in recs]
    return corpus_from_sentences(sents, [r.labels for r in recs], [r.split for r in recs], list(CLASS_NAMES))


def tiny_encoder_config(**kw):
    from heartlang.st_ecgformer import EncoderConfig

    base = dict(depth=1, hidden=16, heads=2, mlp=32, patch_width=96, max_len=24, conv_channels=(4, 8))
    base.update(kw)
    return EncoderConfig(**base)
