#!/usr/bin/env python3
"""Builds the detection fixtures and their brute-force AP values.

Run from this directory:  python3 make_fixtures.py

Each case is written to <case>.json with its inputs and the expected metrics.
The oracle below is deliberately naive: for every IoU threshold and class it
replays the greedy matching by scanning all ground-truth boxes, then for each
of the 101 recall levels takes the best precision over every prefix of the
ranked list that reaches that recall.
"""

import json

THRESHOLDS = [(50 + 5 * i) / 100 for i in range(10)]


def iou(a, b):
    ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    ix = min(ax2, bx2) - max(ax1, bx1)
    iy = min(ay2, by2) - max(ay1, by1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def hits_for(dets, gts, t):
    ranked = sorted(dets, key=lambda d: -d["score"])  # stable
    taken = [False] * len(gts)
    hits = []
    for d in ranked:
        best, best_iou = None, None
        for gi, g in enumerate(gts):
            if taken[gi] or g["image"] != d["image"]:
                continue
            o = iou(d["box"], g["box"])
            if o >= t and (best is None or o > best_iou):
                best, best_iou = gi, o
        if best is not None:
            taken[best] = True
        hits.append(best is not None)
    return hits


def brute_ap(hits, num_gt):
    if num_gt == 0:
        return 0.0
    prefixes = []
    for k in range(1, len(hits) + 1):
        tp = sum(hits[:k])
        prefixes.append((tp / k, tp / num_gt))
    total = 0.0
    for r in range(101):
        level = r / 100
        reach = [p for (p, rec) in prefixes if rec >= level]
        total += max(reach) if reach else 0.0
    return total / 101


def mean(xs):
    if not xs:
        return None
    s = 0.0
    for x in xs:
        s += x
    return s / len(xs)


def evaluate(case):
    vocab = sorted(case["vocab"], key=lambda c: c["id"])
    per_class = {}
    for c in vocab:
        gts = [g for g in case["groundtruth"] if g["class"] == c["id"]]
        dets = [d for d in case["detections"] if d["class"] == c["id"]]
        if not gts:
            continue
        aps = [brute_ap(hits_for(dets, gts, t), len(gts)) for t in THRESHOLDS]
        per_class[c["id"]] = {
            "bucket": c["bucket"],
            "weak": c["weak"],
            "ap": mean(aps),
            "per_threshold": aps,
        }
    ids = sorted(per_class)

    def bucket(pred):
        return mean([per_class[i]["ap"] for i in ids if pred(per_class[i])])

    return {
        "map": mean([per_class[i]["ap"] for i in ids]),
        "ap50": mean([per_class[i]["per_threshold"][0] for i in ids]),
        "ap75": mean([per_class[i]["per_threshold"][5] for i in ids]),
        "apr": bucket(lambda c: c["bucket"] == "rare"),
        "apc": bucket(lambda c: c["bucket"] == "common"),
        "apf": bucket(lambda c: c["bucket"] == "frequent"),
        "apr_w": bucket(lambda c: c["bucket"] == "rare" and c["weak"]),
        "apr_z": bucket(lambda c: c["bucket"] == "rare" and not c["weak"]),
        "per_class": {i: per_class[i]["ap"] for i in ids},
    }


def cls(id_, bucket, weak=False):
    return {"id": id_, "name": id_, "synset": None, "bucket": bucket, "weak": weak}


def g(image, c, box):
    return {"image": image, "class": c, "box": box}


def d(image, c, box, score):
    return {"image": image, "class": c, "box": box, "score": score}


CASES = {
    "perfect": {
        "vocab": [cls("cat", "frequent"), cls("dog", "common")],
        "groundtruth": [
            g("im1", "cat", [0, 0, 10, 10]),
            g("im1", "dog", [20, 20, 5, 8]),
            g("im2", "cat", [3, 4, 6, 6]),
        ],
        "detections": [
            d("im1", "cat", [0, 0, 10, 10], 0.9),
            d("im1", "dog", [20, 20, 5, 8], 0.8),
            d("im2", "cat", [3, 4, 6, 6], 0.7),
        ],
    },
    "half": {
        "vocab": [cls("walrus", "rare")],
        "groundtruth": [g("im1", "walrus", [0, 0, 10, 10])],
        "detections": [
            d("im1", "walrus", [50, 50, 5, 5], 0.95),
            d("im1", "walrus", [0, 0, 7, 10], 0.9),
        ],
    },
    "buckets": {
        "vocab": [
            cls("r1", "rare", True),
            cls("r2", "rare", False),
            cls("f1", "frequent"),
            cls("f2", "frequent"),
        ],
        "groundtruth": [
            g("a", "r1", [0, 0, 10, 10]),
            g("a", "r2", [0, 0, 10, 10]),
            g("b", "r2", [20, 0, 10, 10]),
            g("a", "f1", [40, 40, 10, 10]),
            g("b", "f2", [5, 5, 4, 4]),
            g("b", "f2", [30, 30, 4, 4]),
        ],
        "detections": [
            d("a", "r1", [0, 0, 10, 10], 0.9),
            d("a", "r2", [60, 60, 10, 10], 0.8),
            d("b", "r2", [20, 0, 10, 10], 0.7),
            d("a", "f1", [40, 40, 10, 8], 0.6),
            d("b", "f2", [5, 5, 4, 4], 0.5),
            d("b", "f2", [31, 30, 4, 4], 0.55),
            d("b", "f2", [30, 31, 4, 4], 0.4),
        ],
    },
    "crowded": {
        "vocab": [cls("bird", "common")],
        "groundtruth": [
            g("im", "bird", [0, 0, 10, 10]),
            g("im", "bird", [4, 0, 10, 10]),
            g("im", "bird", [8, 0, 10, 10]),
        ],
        "detections": [
            d("im", "bird", [4, 0, 10, 10], 0.9),
            d("im", "bird", [2, 0, 10, 10], 0.8),
            d("im", "bird", [6, 0, 10, 10], 0.7),
            d("im", "bird", [0, 1, 10, 9], 0.6),
            d("im", "bird", [8, 0, 9, 10], 0.5),
        ],
    },
    "ties": {
        "vocab": [cls("kite", "frequent")],
        "groundtruth": [g("x", "kite", [0, 0, 4, 4]), g("y", "kite", [0, 0, 4, 4])],
        "detections": [
            d("x", "kite", [10, 10, 4, 4], 0.5),
            d("x", "kite", [0, 0, 4, 4], 0.5),
            d("y", "kite", [0, 0, 4, 3], 0.5),
        ],
    },
    "localization": {
        "vocab": [cls("cup", "common"), cls("mug", "rare", True)],
        "groundtruth": [
            g("p", "cup", [0, 0, 20, 20]),
            g("p", "mug", [0, 0, 20, 20]),
            g("q", "mug", [10, 10, 10, 10]),
        ],
        "detections": [
            d("p", "cup", [0, 0, 20, 13], 0.8),
            d("p", "mug", [0, 0, 20, 17], 0.9),
            d("q", "mug", [10, 10, 10, 8], 0.3),
            d("q", "mug", [10, 10, 10, 10], 0.2),
        ],
    },
    "missed": {
        "vocab": [cls("owl", "rare", False), cls("yak", "common")],
        "groundtruth": [
            g("m", "owl", [0, 0, 5, 5]),
            g("m", "owl", [10, 10, 5, 5]),
            g("m", "yak", [0, 0, 8, 8]),
        ],
        "detections": [
            d("m", "owl", [10, 10, 5, 5], 0.4),
            d("m", "yak", [1, 1, 8, 8], 0.6),
        ],
    },
}


def main():
    for name, case in CASES.items():
        out = dict(case)
        out["name"] = name
        out["expected"] = evaluate(case)
        with open(f"{name}.json", "w") as f:
            json.dump(out, f, indent=1, sort_keys=True)
            f.write("\n")


if __name__ == "__main__":
    main()
