"""Out-of-band oracles for the golden fixtures.

Reads trace JSON plus its f64 sidecar directly (no Rust code involved) and
writes golden values the Rust tests compare against:

  matrix   set-intersection similarity matrix over the recorded top-k sets
  replay   naive hybrid decode replay under a policy file (token or block mode)
  brute    exhaustive Full/Reuse enumeration for a matrix file
"""

import argparse
import itertools
import json
import math
import os

import numpy as np


def load_trace(path):
    with open(path) as f:
        doc = json.load(f)
    bin_path = os.path.join(os.path.dirname(path), doc["tensors"]["path"])
    data = np.fromfile(bin_path, dtype="<f8")
    tensors = {}
    for e in doc["tensors"]["entries"]:
        n = int(np.prod(e["shape"]))
        tensors[e["name"]] = data[e["offset"] : e["offset"] + n].reshape(e["shape"])
    return doc, tensors


def intersection_matrix(doc):
    layers = doc["config"]["layers"]
    k = doc["budget"]
    steps = doc["steps"]
    m = [[0.0] * (j + 1) for j in range(layers)]
    for j in range(layers):
        for i in range(j + 1):
            if i == j:
                m[j][i] = 1.0
                continue
            total = 0.0
            for s in steps:
                a = set(s["layer"][i]["topk"])
                b = set(s["layer"][j]["topk"])
                total += len(a & b) / k
            m[j][i] = total / len(steps)
    return m


def softmax_attend(q, keys, values):
    logits = keys @ q / math.sqrt(q.shape[0])
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return w @ values, logits


def topk_lowest_index(scores, k):
    order = np.argsort(-scores, kind="stable")
    return sorted(order[: min(k, len(scores))].tolist())


def replay(doc, t, policy, mode, budget, block_size):
    cfg = doc["config"]
    L, H, d, N = cfg["layers"], cfg.get("heads", 1), cfg["headDim"], cfg["contextLen"]
    queries, keys, values = t["queries"], t["keys"], t["values"]
    baseline = t["outputs"]
    per_layer = np.zeros(L)
    steps = len(doc["steps"])
    for s in range(steps):
        n = N + s
        sel = None
        for l in range(L):
            q = queries[s, l].reshape(H, d)
            ks = keys[l, :, :n, :]
            vs = values[l, :, :n, :]
            if policy["actions"][l] == "full":
                outs, agg = [], np.zeros(n)
                for h in range(H):
                    o, logits = softmax_attend(q[h], ks[h], vs[h])
                    outs.append(o)
                    agg += logits
                if mode == "token":
                    sel = topk_lowest_index(agg, budget)
                else:
                    nb = math.ceil(n / block_size)
                    pooled = np.array([agg[b * block_size : min((b + 1) * block_size, n)].max() for b in range(nb)])
                    blocks = topk_lowest_index(pooled, budget)
                    sel = [x for b in blocks for x in range(b * block_size, min((b + 1) * block_size, n))]
                out = np.concatenate(outs)
            else:
                idx = np.array(sel)
                out = np.concatenate([softmax_attend(q[h], ks[h][idx], vs[h][idx])[0] for h in range(H)])
            ref = baseline[s, l]
            per_layer[l] += np.linalg.norm(out - ref) / np.linalg.norm(ref)
    per_layer /= steps
    return per_layer.tolist(), float(per_layer.mean())


def brute(m, theta):
    L = len(m)
    best = None
    optima = 0
    for mask in itertools.product([False, True], repeat=L - 1):
        full = [True] + [not r for r in mask]
        src, s, ok = 0, 1.0, True
        for j in range(1, L):
            if full[j]:
                src = j
                s += 1.0
            else:
                if m[j][src] < theta:
                    ok = False
                    break
                s += m[j][src]
        if not ok:
            continue
        key = (sum(full), -s)
        if best is None or key < best[0]:
            best, optima = (key, full), 1
        elif key == best[0]:
            optima += 1
    (c, neg_s), full = best
    return {"fullCount": c, "cumSimilarity": -neg_s, "actions": ["full" if f else "reuse" for f in full], "optima": optima}


def main():
    ap = argparse.ArgumentParser()
    sub = ap.add_subparsers(dest="cmd", required=True)
    p = sub.add_parser("matrix")
    p.add_argument("trace")
    p = sub.add_parser("replay")
    p.add_argument("trace")
    p.add_argument("policy")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--block-size", type=int)
    p = sub.add_parser("brute")
    p.add_argument("matrix")
    p.add_argument("--theta", type=float, required=True)
    a = ap.parse_args()

    if a.cmd == "matrix":
        doc, _ = load_trace(a.trace)
        out = {"L": doc["config"]["layers"], "k": doc["budget"], "rows": intersection_matrix(doc)}
    elif a.cmd == "replay":
        doc, t = load_trace(a.trace)
        with open(a.policy) as f:
            policy = json.load(f)
        mode = "token" if a.block_size is None else "block"
        per_layer, mean = replay(doc, t, policy, mode, a.budget, a.block_size)
        out = {"mode": mode, "budget": a.budget, "blockSize": a.block_size, "layerMeanRnmse": per_layer, "meanRnmse": mean}
    else:
        with open(a.matrix) as f:
            doc = json.load(f)
        L, e = doc["L"], doc["entries"]
        m = [[e[j * (j + 1) // 2 + i] for i in range(j + 1)] for j in range(L)]
        out = brute(m, a.theta)
        out["theta"] = a.theta
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
