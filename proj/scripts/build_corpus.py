#!/usr/bin/env python3
"""Assemble a plain-text training corpus from documentation found on the local machine.

No network is needed. Markdown, reStructuredText and plain-text files under the
given roots are filtered for prose-like content, deduplicated, and written as
documents separated by a line holding a single form feed.

    python3 scripts/build_corpus.py --out data/corpus.txt --min-bytes 6000000
"""

import argparse
import hashlib
import os
import sys

DEFAULT_ROOTS = [
    "/usr/share/doc",
    "/usr/lib/python3",
    "/usr/local/lib/python3.10/dist-packages",
    "/usr/lib/node_modules",
    "/opt/cargo/registry/src",
]
SUFFIXES = (".md", ".rst", ".txt")
SEPARATOR = "\n\f\n"


def prose_score(text):
    letters = sum(1 for c in text if c.isalpha() or c in " \n")
    return letters / max(1, len(text))


def candidates(roots):
    for root in roots:
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames[:] = sorted(d for d in dirnames if not d.endswith((".dist-info", ".egg-info", "tests", "test")))
            for name in sorted(filenames):
                if name.lower().endswith(SUFFIXES):
                    yield os.path.join(dirpath, name)


def clean(text):
    # Drop fenced code blocks; keep paragraph structure.
    out, fenced = [], False
    for line in text.splitlines():
        if line.lstrip().startswith("```"):
            fenced = not fenced
            continue
        if fenced or "\f" in line:
            continue
        out.append(line.rstrip())
    return "\n".join(out).strip() + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/corpus.txt")
    ap.add_argument("--min-bytes", type=int, default=6_000_000)
    ap.add_argument("--min-score", type=float, default=0.8)
    ap.add_argument("roots", nargs="*", default=DEFAULT_ROOTS)
    args = ap.parse_args()

    seen, docs, total = set(), [], 0
    for path in candidates(args.roots):
        try:
            size = os.path.getsize(path)
            if size < 2000 or size > 400_000:
                continue
            with open(path, "rb") as f:
                raw = f.read()
            text = clean(raw.decode("utf-8"))
        except (OSError, UnicodeDecodeError):
            continue
        if len(text) < 1500 or prose_score(text) < args.min_score:
            continue
        digest = hashlib.md5(text.encode()).hexdigest()
        if digest in seen:
            continue
        seen.add(digest)
        docs.append(text)
        total += len(text.encode())
        if total >= args.min_bytes:
            break

    if total < args.min_bytes:
        print(f"only {total} bytes of prose found, wanted {args.min_bytes}", file=sys.stderr)
        return 1
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(SEPARATOR.join(docs))
    print(f"wrote {len(docs)} documents, {total} bytes to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
