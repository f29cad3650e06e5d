"""Minimal generator server speaking the JSON-lines protocol on stdin/stdout.

    python -m reporag.genserver --lm lm.json [--lang python]
    python -m reporag.genserver --echo "canned text"
"""

from __future__ import annotations

import argparse
import json
import sys

from .lm import NGramModel
from .pipeline import NGramAdapter


def serve(generate, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        text = generate(req["prompt"], int(req["max_new_tokens"]))
        stdout.write(json.dumps({"id": req["id"], "completion": text}, ensure_ascii=False) + "\n")
        stdout.flush()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="reporag-genserver")
    mode = ap.add_mutually_exclusive_group(required=True)
    mode.add_argument("--lm", help="n-gram model file for greedy decoding")
    mode.add_argument("--echo", help="return this text for every request")
    ap.add_argument("--lang", default="python", choices=["python", "java"])
    args = ap.parse_args(argv)
    if args.echo is not None:
        canned = args.echo
        serve(lambda prompt, n: canned if n > 0 else "")
    else:
        adapter = NGramAdapter(NGramModel.load(args.lm), args.lang)
        serve(adapter.generate)
    return 0


if __name__ == "__main__":
    sys.exit(main())
