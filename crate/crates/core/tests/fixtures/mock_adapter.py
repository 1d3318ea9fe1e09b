#!/usr/bin/env python3
"""Minimal adapter for protocol tests.

Model: a logistic curve on pixel intensity whose midpoint is halfway
between the mean defect and mean background intensity of the labeled
patches. Embedding: a normalized 8-bin intensity histogram.

MOCK_ADAPTER_FAIL_TRAIN=N makes the N-th train request (1-based) fail.
"""
import json
import math
import os
import struct
import sys

from PIL import Image

DIM = 8
EPS = 1e-7


def write_tensor(path, dims, values):
    with open(path, "wb") as f:
        f.write(b"ALTENS01")
        f.write(struct.pack("<I", len(dims)))
        for d in dims:
            f.write(struct.pack("<Q", d))
        f.write(struct.pack("<%df" % len(values), *values))


def load_manifest(path):
    with open(path) as f:
        doc = json.load(f)
    base = os.path.dirname(os.path.abspath(path))
    return {e["id"]: (os.path.join(base, e["image"]), os.path.join(base, e["mask"])) for e in doc["entries"]}


def pixels(path):
    img = Image.open(path).convert("L")
    return img.size, [v / 255.0 for v in img.getdata()]


class Adapter:
    def __init__(self):
        self.greeted = False
        self.entries = None
        self.midpoint = None
        self.trainings = 0
        self.fail_at = int(os.environ.get("MOCK_ADAPTER_FAIL_TRAIN", "0"))

    def hello(self, _req):
        self.greeted = True
        return {"ok": True, "name": "mock", "embedding_dim": DIM}

    def train(self, req):
        self.trainings += 1
        if self.trainings == self.fail_at:
            return {"ok": False, "error": "injected failure"}
        ids = req.get("labeled_ids", [])
        if not ids:
            return {"ok": False, "error": "empty training set"}
        path = req.get("manifest_path", "")
        try:
            self.entries = load_manifest(path)
        except OSError:
            return {"ok": False, "error": "cannot read manifest %s" % path}
        fg, bg = [], []
        for i in ids:
            if i not in self.entries:
                return {"ok": False, "error": "unknown id %d" % i}
            image, mask = self.entries[i]
            _, x = pixels(image)
            _, m = pixels(mask)
            for v, t in zip(x, m):
                (fg if t > 0 else bg).append(v)
        mean_bg = sum(bg) / len(bg) if bg else 0.5
        mean_fg = sum(fg) / len(fg) if fg else mean_bg - 0.2
        self.midpoint = (mean_bg + mean_fg) / 2.0
        return {"ok": True}

    def predict(self, req):
        if self.midpoint is None:
            return {"ok": False, "error": "model not trained"}
        ids = req["ids"]
        out = req["out_dir"]
        os.makedirs(out, exist_ok=True)
        proba, emb, shape = [], [], None
        for i in ids:
            (w, h), x = pixels(self.entries[i][0])
            shape = (h, w)
            for v in x:
                p = 1.0 / (1.0 + math.exp(-20.0 * (self.midpoint - v)))
                proba.append(min(max(p, EPS), 1.0 - EPS))
            hist = [1e-3] * DIM
            for v in x:
                hist[min(int(v * DIM), DIM - 1)] += 1.0
            norm = math.sqrt(sum(c * c for c in hist))
            emb.extend(c / norm for c in hist)
        p_path = os.path.join(out, "proba.bin")
        e_path = os.path.join(out, "embeddings.bin")
        write_tensor(p_path, [len(ids), shape[0], shape[1]], proba)
        write_tensor(e_path, [len(ids), DIM], emb)
        return {"ok": True, "proba": p_path, "embeddings": e_path}


def main():
    adapter = Adapter()
    for line in sys.stdin:
        req = json.loads(line)
        op = req.get("op")
        if op == "shutdown":
            print(json.dumps({"ok": True}), flush=True)
            return
        if op == "hello":
            resp = adapter.hello(req)
        elif not adapter.greeted:
            resp = {"ok": False, "error": "handshake required"}
        elif op == "train":
            resp = adapter.train(req)
        elif op == "predict":
            resp = adapter.predict(req)
        else:
            resp = {"ok": False, "error": "unknown op %r" % op}
        print(json.dumps(resp), flush=True)


if __name__ == "__main__":
    main()
