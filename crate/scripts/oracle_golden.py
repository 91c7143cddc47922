#!/usr/bin/env python3
"""Independent per-QA check of the golden replay fixture.

Recomputes, from the corpus and transcript store alone, what every QA of the
ocr_baseline and model_box runs should score, and compares against the
committed artifacts and reports. Standard library only.

    python3 scripts/oracle_golden.py fixtures/golden
"""

import ast
import hashlib
import json
import re
import sys
from pathlib import Path

TAU = 0.5


def zero_shot(question):
    return (
        "Based only on the document image, answer the following question:\n"
        f"Question: {question}\n"
        "Provide ONLY a JSON response in the following format:\n"
        '{\n  "content": "answer",\n  "position": [x, y, w, h]\n}\n'
        "Each position value MUST be in the range [0, 1000]."
    )


def key(endpoint, prompt, image):
    h = hashlib.sha256()
    h.update(endpoint.encode())
    h.update(b"\0")
    h.update(prompt.encode())
    h.update(b"\0")
    h.update(hashlib.sha256(image).digest())
    return h.hexdigest()


def objects(text):
    text = re.sub(r"```[A-Za-z]*\n?", "", text)
    out = []
    for i, c in enumerate(text):
        if c != "{":
            continue
        depth, quote = 0, None
        for j in range(i, len(text)):
            ch = text[j]
            if quote:
                if ch == quote and text[j - 1] != "\\":
                    quote = None
                continue
            if ch in "\"'":
                quote = ch
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    out.append(text[i : j + 1])
                    break
    return out


def parse(raw):
    """(content, prompt box or None); content None means no answer."""
    for cand in objects(raw):
        obj = None
        try:
            obj = json.loads(cand)
        except ValueError:
            try:
                obj = ast.literal_eval(cand)
            except (ValueError, SyntaxError):
                pass
        if isinstance(obj, dict) and isinstance(obj.get("content"), str) and obj["content"].strip():
            pos = obj.get("position")
            box = [int((float(v) + 0.5) // 1) for v in pos] if isinstance(pos, list) and len(pos) == 4 else None
            return obj["content"].strip(), box
    return (raw.strip() or None), None


def norm_box(pb):
    x, y, w, h = pb
    x1, y1 = min(max(x, 0), 1000), min(max(y, 0), 1000)
    x2, y2 = min(max(x + w, x1), 1000), min(max(y + h, y1), 1000)
    return [x1 / 1000, y1 / 1000, x2 / 1000, y2 / 1000]


def iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return 0.0 if union <= 0 else min(1.0, max(0.0, inter / union))


def lev(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def normalize(s):
    return " ".join(s.split()).lower()


def anls(pred, gt):
    p, g = normalize(pred), normalize(gt)
    n = max(len(p), len(g))
    s = 1.0 if n == 0 else 1.0 - lev(p, g) / n
    return s if s >= TAU else 0.0


def locate(answer, tokens):
    """Tokens are single words on one page in this fixture; rows are exact."""
    toks = sorted(tokens, key=lambda t: (t["box"][1] + t["box"][3] / 2, t["box"][0]))
    words = [normalize(t["t"]) for t in toks]
    needle = normalize(answer).split()
    for pat in (needle, needle[:1]):
        if not pat:
            break
        for s in range(len(words) - len(pat) + 1):
            if words[s : s + len(pat)] == pat:
                run = [norm_box(t["box"]) for t in toks[s : s + len(pat)]]
                return [min(b[0] for b in run), min(b[1] for b in run), max(b[2] for b in run), max(b[3] for b in run)]
    return None


def main(root):
    root = Path(root)
    run = json.loads((root / "run.json").read_text())
    endpoint = run["endpoint"]["name"]
    docs, qas = {}, []
    for line in (root / run["corpus"]).read_text().splitlines():
        rec = json.loads(line)
        (docs.__setitem__(rec["doc_id"], rec) if rec["kind"] == "doc" else qas.append(rec))
    store = {}
    for line in (root / run["replay"]).read_text().splitlines():
        t = json.loads(line)
        store[t["key"]] = t["response"]

    expected = {}
    for qa in sorted(qas, key=lambda q: q["qa_id"]):
        doc = docs[qa["doc_id"]]
        page = qa["boxes"][0]["page"]
        image = (root / doc["pages"][page]["image"]).read_bytes()
        raw = store[key(endpoint, zero_shot(qa["question"]), image)]
        content, pbox = parse(raw)
        gt = norm_box(qa["boxes"][0]["box"])
        tokens = [t for t in doc["tokens"] if t["page"] == page]
        a = 0.0 if content is None else anls(content, qa["answer"])
        ocr = locate(content or "", tokens)
        model = norm_box(pbox) if pbox else None
        expected[qa["qa_id"]] = {
            "anls": a,
            "ocr_baseline": iou(ocr, gt) if ocr else 0.0,
            "model_box": iou(model, gt) if model else 0.0,
        }

    failures = 0
    for loc in ("ocr_baseline", "model_box"):
        arts = [json.loads(l) for l in (root / "expected" / loc / "artifacts.jsonl").read_text().splitlines()]
        if [a["qa_id"] for a in arts] != sorted(expected):
            print(f"{loc}: qa_id set/order mismatch")
            failures += 1
        for art in arts:
            e = expected[art["qa_id"]]
            for field, want in (("anls", e["anls"]), ("iou", e[loc])):
                if abs(art[field] - want) > 1e-12:
                    print(f"{loc} {art['qa_id']} {field}: artifact {art[field]!r} oracle {want!r}")
                    failures += 1
        report = json.loads((root / "expected" / loc / "report.json").read_text())[0]
        n = len(expected)
        for field, want in (
            ("anls", sum(e["anls"] for e in expected.values()) / n),
            ("mean_iou", sum(e[loc] for e in expected.values()) / n),
        ):
            if abs(report[field] - want) > 1e-12:
                print(f"{loc} report {field}: {report[field]!r} oracle {want!r}")
                failures += 1
        print(f"{loc}: {len(arts)} QAs checked, anls {report['anls']:.6f}, mean_iou {report['mean_iou']:.6f}")
    print("OK" if failures == 0 else f"{failures} mismatches")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1] if len(sys.argv) > 1 else "fixtures/golden"))
