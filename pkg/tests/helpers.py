"""Test-only utilities: a tiny JSON HTTP stub and cheap scene builders."""
import json
import threading
from contextlib import contextmanager
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np

from langplace.core import AABB, Scene, SceneObject, Workspace

SLOTS = [(-0.4, 0.1), (-0.1, 0.1), (0.2, 0.1), (-0.25, -0.2), (0.1, -0.2)]


def scene_with_names(names, rid=0):
    objs = [SceneObject(k, n, AABB.from_bounds(x, y, x + 0.08, y + 0.08), f"t{rid}/o{k}")
            for k, (n, (x, y)) in enumerate(zip(names, SLOTS))]
    return Scene(Workspace(), objs, f"t{rid}/workspace")


def random_scene(rng, vocabulary, rid=0):
    idx = rng.choice(len(vocabulary), size=5, replace=False)
    return scene_with_names([vocabulary[i] for i in idx], rid)


@contextmanager
def json_server(handler_fn):
    """Serve ``handler_fn(path, body_dict) -> (status, payload)`` on localhost; yields the base URL."""
    seen = []

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
            seen.append((self.path, body))
            status, payload = handler_fn(self.path, body)
            data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    t = threading.Thread(target=server.serve_forever, daemon=True)
    t.start()
    try:
        yield f"http://127.0.0.1:{server.server_port}", seen
    finally:
        server.shutdown()
        server.server_close()


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


# -- finite differences ---------------------------------------------------------

def relu_pattern(pair, V, T):
    """Signs of every hidden pre-activation in both adapters."""
    out = []
    for w, X in ((pair.visual, V), (pair.textual, T)):
        pre1 = X @ w.W1.T + w.b1
        pre2 = np.maximum(pre1, 0) @ w.W2.T + w.b2
        out += [pre1 > 0, pre2 > 0]
    return out


def fd_check(pair, V, T, labels, rng, per_tensor=3, eps=1e-4, floor=1e-7, max_draws=200):
    """Central differences on ``per_tensor`` random coordinates of each of the 12 weight tensors.

    Coordinates whose +-eps stencil flips a ReLU (the loss is not differentiable
    there, so the difference quotient is not a derivative) are redrawn.
    Returns a list of (tensor index, flat index, analytic, numeric, relative error).
    """
    from langplace.adapter import backward, ce_loss

    _, gv, gt = backward(pair, V, T, labels)
    grads = gv.arrays() + gt.arrays()
    base = relu_pattern(pair, V, T)
    rows = []
    for k, (p, g) in enumerate(zip(pair.arrays(), grads)):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        taken = 0
        for _ in range(max_draws):
            if taken == per_tensor:
                break
            i = int(rng.integers(flat.size))
            old = flat[i]
            flat[i] = old + eps
            lp, pat_p = ce_loss(pair.probs(V, T), labels), relu_pattern(pair, V, T)
            flat[i] = old - eps
            lm, pat_m = ce_loss(pair.probs(V, T), labels), relu_pattern(pair, V, T)
            flat[i] = old
            if not all(np.array_equal(a, b) and np.array_equal(a, c) for a, b, c in zip(base, pat_p, pat_m)):
                continue
            num = (lp - lm) / (2 * eps)
            rel = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            rows.append((k, i, float(gflat[i]), float(num), float(rel)))
            taken += 1
        assert taken == per_tensor, f"tensor {k}: too many kinked coordinates"
    return rows


def random_tokens(rng, n_visual=6, n_text=2, dim=512):
    V = rng.standard_normal((n_visual, dim))
    T = rng.standard_normal((n_text, dim))
    return unit_rows(V), unit_rows(T)


def unit_rows(X):
    return X / np.linalg.norm(X, axis=1, keepdims=True)
