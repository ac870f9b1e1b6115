"""Freeze oracle values into ``tests/golden/``.

Run once from the repository root after a change to the oracle has been
reviewed::

    python3 scripts/bootstrap_golden.py

The FIX-A values come from plain Python loops over every (y, z) state and
every sample tuple, independent of the vectorized oracle in
``sspiwo.tabular``. The tests then check the oracle, the torch kernel and
the CLI against these frozen numbers.
"""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path

from sspiwo.data import SYN_A, _arrays, _checksum, bayes_accuracy, generate_synthetic
from sspiwo.tabular import load_fixture

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"
KS = (1, 2, 3, 4)


def _lme(values):
    m = max(values)
    return m + math.log(sum(math.exp(v - m) for v in values) / len(values))


def _tuple_mean(states, k):
    """E over k iid draws from ``states`` = [(prob, log_weight)] of log mean exp."""
    total = 0.0
    for tup in itertools.product(states, repeat=k):
        p = math.prod(s[0] for s in tup)
        if p > 0:
            total += p * _lme([s[1] for s in tup])
    return total


def _kl(q, p):
    return sum(qi * (math.log(qi) - math.log(pi)) for qi, pi in zip(q, p) if qi > 0)


def fix_a_record(model, x):
    t = {k: v.tolist() for k, v in model.tables().items()}
    Y, Z = model.n_y, model.n_z
    pz, pyz, pxyz = t["prior_z"], t["gen_y_given_z"], t["gen_x_given_yz"]
    qy, qz = t["inf_y_given_x"][x], t["inf_z_given_x"][x]
    joint = [[pz[z] * pyz[z][y] * pxyz[y][z][x] for z in range(Z)] for y in range(Y)]
    px = sum(map(sum, joint))
    post = [[joint[y][z] / px for z in range(Z)] for y in range(Y)]
    post_y = [sum(post[y]) for y in range(Y)]
    post_z = [sum(post[y][z] for y in range(Y)) for z in range(Z)]
    logw = {(y, z): math.log(joint[y][z]) - math.log(qy[y] * qz[z]) for y in range(Y) for z in range(Z)}

    # PIWO: y drawn once, k z-draws weighted; iPIWO: z drawn once, k y-draws weighted
    def piwo(k):
        return sum(qy[y] * (_tuple_mean([(qz[z], math.log(joint[y][z]) - math.log(qz[z])) for z in range(Z)], k)
                            - math.log(qy[y])) for y in range(Y))

    def ipiwo(k):
        return sum(qz[z] * (_tuple_mean([(qy[y], math.log(joint[y][z]) - math.log(qy[y])) for y in range(Y)], k)
                            - math.log(qz[z])) for z in range(Z))

    iwae = [_tuple_mean([(qy[y] * qz[z], logw[(y, z)]) for y in range(Y) for z in range(Z)], k) for k in KS]
    sup = {}
    for y in range(Y):
        states = [(qz[z], math.log(joint[y][z]) - math.log(qz[z])) for z in range(Z)]
        row = sum(post[y])
        sup[str(y)] = {
            "log_pxy": math.log(sum(joint[y])),
            "elbo": _tuple_mean(states, 1),
            "iwae": [_tuple_mean(states, k) for k in KS],
            "kl_z_given_xy": _kl(qz, [post[y][z] / row for z in range(Z)]),
        }
    return {
        "log_px": math.log(px),
        "posterior": post,
        "kl_yz": _kl([qy[y] * qz[z] for y in range(Y) for z in range(Z)], [v for r in post for v in r]),
        "kl_y": _kl(qy, post_y),
        "kl_z": _kl(qz, post_z),
        "elbo": iwae[0],
        "iwae": iwae,
        "piwo": [piwo(k) for k in KS],
        "ipiwo": [ipiwo(k) for k in KS],
        "limit_piwo": math.log(px) - _kl(qy, post_y),
        "limit_ipiwo": math.log(px) - _kl(qz, post_z),
        "supervised": sup,
    }


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    model = load_fixture("fix_a")
    fix_a = {"ks": list(KS), "x": {str(x): fix_a_record(model, x) for x in range(model.n_x)}}
    (GOLDEN / "fix_a.json").write_text(json.dumps(fix_a, indent=2, sort_keys=True) + "\n")

    ds = generate_synthetic(SYN_A)
    header = {"vocab_size": ds.vocab_size, "n_classes": ds.n_classes}
    syn_a = {
        "bayes_accuracy": bayes_accuracy(SYN_A),
        "n_labeled": len(ds.labeled), "n_unlabeled": len(ds.unlabeled), "n_test": len(ds.test),
        "class_counts": [int((ds.labels == c).sum()) for c in range(ds.n_classes)],
        "checksum": _checksum(_arrays(ds), header),
    }
    (GOLDEN / "syn_a.json").write_text(json.dumps(syn_a, indent=2, sort_keys=True) + "\n")
    print(f"wrote {GOLDEN / 'fix_a.json'} and {GOLDEN / 'syn_a.json'}")


if __name__ == "__main__":
    main()
