#!/usr/bin/env python3
"""Export an OpenCLIP model to the rsprompt backbone archive.

Writes <out>.safetensors (state dict, fp32) and <out>.json (geometry, preprocessing,
token layout).

    python3 tools/export_openclip.py --model ViT-B-16 --pretrained openai --out vitb16
"""
import argparse
import json

import open_clip
import torch
from safetensors.torch import save_file


def geometry_of(model, name, quick_gelu):
    v = model.visual
    return {
        "name": name,
        "embed_dim": int(model.text_projection.shape[1]),
        "context_length": int(model.positional_embedding.shape[0]),
        "vocab_size": int(model.token_embedding.weight.shape[0]),
        "text_layers": len(model.transformer.resblocks),
        "text_width": int(model.transformer.width),
        "text_heads": int(model.transformer.resblocks[0].attn.num_heads),
        "vision_layers": len(v.transformer.resblocks),
        "vision_width": int(v.conv1.weight.shape[0]),
        "vision_heads": int(v.transformer.resblocks[0].attn.num_heads),
        "patch_size": int(v.conv1.weight.shape[2]),
        "image_size": int(v.image_size[0] if isinstance(v.image_size, tuple) else v.image_size),
        "activation": "quick_gelu" if quick_gelu else "gelu",
    }


def export(model, out, name, quick_gelu, tokens=None):
    sd = {k: t.detach().float().contiguous() for k, t in model.state_dict().items()
          if k != "attn_mask" and not k.endswith("attn_mask")}
    save_file(sd, out + ".safetensors")
    geo = geometry_of(model, name, quick_gelu)
    meta = {
        "format": "rsprompt-backbone/1",
        "geometry": geo,
        "preprocess": {
            "target_size": geo["image_size"],
            "resize": "bicubic-shortest-side",
            "crop": "center",
            "mean": list(open_clip.OPENAI_DATASET_MEAN),
            "std": list(open_clip.OPENAI_DATASET_STD),
        },
        "tokens": tokens or {"sos_id": 49406, "eos_id": 49407, "pad_id": 0, "fold": False},
    }
    with open(out + ".json", "w") as f:
        json.dump(meta, f, indent=2)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="ViT-B-16")
    ap.add_argument("--pretrained", default="openai")
    ap.add_argument("--out", required=True, help="output path without extension")
    args = ap.parse_args()
    model, _, _ = open_clip.create_model_and_transforms(args.model, pretrained=args.pretrained)
    model.eval()
    quick = args.pretrained == "openai" or "quickgelu" in args.model.lower()
    export(model, args.out, args.model, quick)


if __name__ == "__main__":
    main()
