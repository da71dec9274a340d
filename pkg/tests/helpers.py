"""Shared fixture builders: a small synthetic corpus with distinctive tokens.

Each section carries one long unique code token so mock generators and the
mock evaluator can tell passages apart by plain token overlap.
"""

from __future__ import annotations

import json
from pathlib import Path

PRODUCTS = ["prodalpha", "prodbeta", "prodgamma"]
CATEGORIES = {"prodalpha": "deposit", "prodbeta": "deposit", "prodgamma": "loan"}


def code_token(product: str, doc_n: int, section_n: int) -> str:
    return f"zz{product}d{doc_n}s{section_n}feature"


def toy_document(product: str, doc_n: int, sections_per_doc: int = 4) -> dict:
    body = []
    for s in range(1, sections_per_doc + 1):
        code = code_token(product, doc_n, s)
        body.append({
            "level": 1,
            "heading": f"Part {s} terms",
            "text": (
                f"The {code} clause applies to {product} holders. "
                f"Interest accrues daily under this part. "
                f"Early closure changes the payout for part {s}."
            ),
        })
    return {
        "doc_id": f"{product}-doc{doc_n}",
        "product_id": product,
        "category": CATEGORIES[product],
        "title": f"{product} guide {doc_n}",
        "last_modified": "2024-06-01",
        "body": body,
    }


def write_manifest(root: Path, docs: list[dict]) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for doc in docs:
            doc_path = root / f"{doc['doc_id']}.json"
            doc_path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
            fh.write(json.dumps({"doc_id": doc["doc_id"], "path": doc_path.name}) + "\n")
    return manifest


def build_toy_manifest(root: Path, docs_per_product: int = 2,
                       sections_per_doc: int = 4) -> Path:
    docs = [
        toy_document(product, d, sections_per_doc)
        for product in PRODUCTS
        for d in range(1, docs_per_product + 1)
    ]
    return write_manifest(root, docs)
