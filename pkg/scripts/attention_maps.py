"""Export attention heat maps and similarity matrices for meta-test images of a meta-finetuned checkpoint."""
import argparse
from pathlib import Path

import numpy as np

from dcap.analysis import descriptor_cosine_matrix, export_attention_map, write_matrix_csv
from dcap.checkpoint import Checkpoint
from dcap.pipeline import config_from_dict, model_from_checkpoint
from dcap.synth import synth_generate


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("checkpoint")
    p.add_argument("--images", type=int, default=8)
    p.add_argument("--out", default="runs/attention")
    args = p.parse_args()
    ckpt = Checkpoint.load(args.checkpoint)
    config = config_from_dict(ckpt.config)
    data = synth_generate(config.data)
    model = model_from_checkpoint(ckpt, config)
    idx = data.split_indices("meta-test")
    picks = idx[np.linspace(0, len(idx) - 1, args.images).astype(int)]
    maps = model.backbone.feature_maps(data.as_float(picks))
    raw, alpha = model.attention(maps)
    out = Path(args.out)
    for i, fm, r, a in zip(picks, maps, raw, alpha):
        export_attention_map(data.images[i], r, a, out / f"img{i:05d}", fm.shape[:2])
        write_matrix_csv(descriptor_cosine_matrix(fm), out / f"img{i:05d}_similarity.csv")
        print(f"img{i:05d}: max weight {a.max():.4f} (uniform {1 / a.size:.4f})")


if __name__ == "__main__":
    main()
