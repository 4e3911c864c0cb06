import argparse
import csv

from rheston.storage import ResultStore


def main() -> None:
    parser = argparse.ArgumentParser(description="Summarise a finished run from its output directory")
    parser.add_argument("experiment")
    parser.add_argument("--out", default="output")
    args = parser.parse_args()

    store = ResultStore(args.out)
    meta = store.load_metadata(args.experiment)
    if meta is None:
        raise SystemExit(f"no metadata for {args.experiment!r} under {args.out}")
    csv_path, _ = store.paths(args.experiment)
    with open(csv_path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    print(
        {
            "experiment": meta["experiment"],
            "seed": meta["seed"],
            "git": meta["git"],
            "rows": len(rows),
            "clamp_events": meta["clamp_events"],
            "floor_events": meta.get("floor_events", 0),
            "wall_times": meta["wall_times"],
            "duration_seconds": round(meta["duration_seconds"], 2),
        }
    )
    if rows and "max_rel_error" in rows[0]:
        for row in rows:
            print(f"  M={row['M']:>5}  error={row['max_rel_error']:<12} rate={row['rate']}")


if __name__ == "__main__":
    main()
