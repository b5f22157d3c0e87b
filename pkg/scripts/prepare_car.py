"""Turn the UCI Car Evaluation file into the one-hot CSV used by ``exm compare``.

    python scripts/prepare_car.py car.data out_dir/

writes ``out_dir/car.csv`` (21 binary columns plus ``y``, +1 for 'unacc')
and ``out_dir/car.schema``.
"""

import argparse
from pathlib import Path

from expmachines.data import car_from_uci, one_hot_encode, write_csv


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("car_data", help="path to car.data")
    p.add_argument("out_dir")
    p.add_argument("--positive-class", default="unacc")
    args = p.parse_args()
    ds = one_hot_encode(car_from_uci(args.car_data, args.positive_class))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out / "car.csv")
    (out / "car.schema").write_text(ds.schema.to_text())
    print(f"{ds.n_rows} rows, {ds.n_features} binary features, positive fraction {(ds.y > 0).mean():.4f}")


if __name__ == "__main__":
    main()
