"""Write a small planted-noise cipher dataset next to this script."""
from pathlib import Path

from gdig.data import write_records
from gdig.oracle import NoiseSpec, corpus_records

HERE = Path(__file__).resolve().parent


def main(out=HERE / "data"):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {"candidates": (500, 0.10, 2), "seeds": (64, 0.0, 3), "valid": (50, 0.0, 4), "test": (50, 0.0, 5)}
    for name, (n, rate, seed) in splits.items():
        records, flags = corpus_records(NoiseSpec(n, rate, seed, id_prefix=name[0]))
        write_records(records, out / f"{name}.jsonl")
        if rate:
            write_records([{"id": r["id"], "corrupted": f} for r, f in zip(records, flags)],
                          out / f"{name}.flags.jsonl")


if __name__ == "__main__":
    main()
