#!/usr/bin/env python3
"""Regenerates the frozen reference fixtures used by the C++ tests.

  micro_openclip.{safetensors,json}  random OpenCLIP model in the micro geometry
  micro_reference.safetensors        OpenCLIP features, prompted forward passes, gradients
  micro_reference.json               token ids for the reference strings
  preprocess_reference.safetensors   Pillow bicubic resizes and full CLIP transforms

Requires torch, open_clip_torch, safetensors, Pillow.
"""
import json
import math
import os
import sys

import numpy as np
import open_clip
import torch
from open_clip.model import CLIP, CLIPTextCfg, CLIPVisionCfg
from PIL import Image
from safetensors.torch import save_file

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(HERE, "..", "..", "tools"))
from export_openclip import export  # noqa: E402

VOCAB = 64
SOS, EOS = VOCAB - 2, VOCAB - 1


def fold(i):
    return 1 + i % (VOCAB - 3)


def micro_model():
    torch.manual_seed(7)
    vision = CLIPVisionCfg(layers=2, width=32, head_width=8, patch_size=8, image_size=16, mlp_ratio=4.0)
    text = CLIPTextCfg(context_length=77, vocab_size=VOCAB, width=32, heads=4, layers=2)
    model = CLIP(embed_dim=32, vision_cfg=vision, text_cfg=text, quick_gelu=True)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "logit_scale":
                p.fill_(math.log(100.0))
            elif name.endswith(("ln_1.weight", "ln_2.weight", "ln_pre.weight", "ln_post.weight", "ln_final.weight")):
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            elif p.dim() >= 2 and "embedding" not in name:
                p.copy_(torch.randn_like(p) / math.sqrt(p.shape[-1] if p.dim() == 2 else p[0].numel()))
            else:
                p.copy_(0.3 * torch.randn_like(p))
    return model.eval()


def token_ids(text):
    tok = open_clip.get_tokenizer("ViT-B-16")
    full = tok([text])[0].tolist()
    body = full[1:full.index(49407)]
    ids = [SOS] + [fold(i) for i in body] + [EOS]
    return ids + [0] * (77 - len(ids))


def block(blk, x, causal):
    n = x.shape[1]
    mask = None
    if causal:
        mask = torch.full((n, n), float("-inf"), dtype=x.dtype).triu_(1)
    return blk(x, attn_mask=mask)


def text_forward(m, ids, deep=None, start=1):
    """Manual text forward with deep prompt replacement at the input of blocks >= 1."""
    ids = torch.tensor([ids])
    eos = int(ids.argmax(-1))
    x = m.token_embedding(ids).double() + m.positional_embedding.double()
    for li, blk in enumerate(m.transformer.resblocks):
        if deep is not None and li >= 1 and li - 1 < len(deep):
            x = torch.cat([x[:, :start], deep[li - 1][None], x[:, start + deep[li - 1].shape[0]:]], dim=1)
        x = block(blk, x, True)
    x = m.ln_final(x)
    f = x[0, eos] @ m.text_projection
    return f / f.norm()


def text_forward_embeds(m, emb, eos, deep=None, start=1):
    x = emb[None] + m.positional_embedding.double()[: emb.shape[0]]
    for li, blk in enumerate(m.transformer.resblocks):
        if deep is not None and li >= 1 and li - 1 < len(deep):
            x = torch.cat([x[:, :start], deep[li - 1][None], x[:, start + deep[li - 1].shape[0]:]], dim=1)
        x = block(blk, x, True)
    x = m.ln_final(x)
    f = x[0, eos] @ m.text_projection
    return f / f.norm()


def image_forward(m, px, prompts=None):
    v = m.visual
    x = v.conv1(px[None])
    x = x.reshape(1, x.shape[1], -1).permute(0, 2, 1)
    cls = v.class_embedding.double().expand(1, 1, -1)
    x = torch.cat([cls, x], dim=1) + v.positional_embedding.double()
    n = 0
    if prompts is not None:
        n = prompts[0].shape[0]
        x = torch.cat([x, prompts[0][None]], dim=1)
    x = v.ln_pre(x)
    for li, blk in enumerate(v.transformer.resblocks):
        if prompts is not None and 1 <= li < len(prompts):
            x = torch.cat([x[:, :-n], prompts[li][None]], dim=1)
        x = block(blk, x, False)
    x = v.ln_post(x[:, 0])
    f = x[0] @ v.proj
    return f / f.norm()


def make_micro():
    model = micro_model()
    out = os.path.join(HERE, "micro_openclip")
    export(model, out, "micro", True, {"sos_id": SOS, "eos_id": EOS, "pad_id": 0, "fold": True})
    # reload the exported fp32 weights into a double model so references match the archive
    m = model.double()
    texts = ["a photo of a forest", "a satellite photo of annual crop land", "mobile home park", ""]
    ids = [token_ids(t) for t in texts]
    g = torch.Generator().manual_seed(11)
    pixels = torch.randn(3, 3, 16, 16, generator=g).double()

    ref = {}
    with torch.no_grad():
        ref["text_features"] = torch.stack([text_forward(m, i) for i in ids])
        ref["open_clip_text_features"] = torch.nn.functional.normalize(
            m.encode_text(torch.tensor(ids)), dim=-1)
        ref["image_features"] = torch.stack([image_forward(m, p) for p in pixels])
        ref["open_clip_image_features"] = torch.nn.functional.normalize(m.encode_image(pixels), dim=-1)
    ref["pixels"] = pixels

    # prompted passes and gradients through both towers
    deep = [torch.randn(2, 32, generator=g, dtype=torch.float64, requires_grad=True)]
    vis = [torch.randn(2, 32, generator=g, dtype=torch.float64, requires_grad=True) for _ in range(2)]
    ctx = torch.randn(4, 32, generator=g, dtype=torch.float64, requires_grad=True)
    cls_ids = token_ids("annual crop land")
    cls_body = cls_ids[1:cls_ids.index(EOS)]
    seq = [SOS] + [0] * 4 + cls_body + [EOS]
    eos = len(seq) - 1
    emb = m.token_embedding(torch.tensor(seq)).double().detach()
    emb = torch.cat([emb[:1], ctx, emb[5:]], dim=0)
    tf = text_forward_embeds(m, emb, eos, deep=deep, start=1)
    imf = image_forward(m, pixels[0], prompts=vis)
    probe = torch.randn(32, generator=g, dtype=torch.float64)
    loss = 100.0 * (tf * imf).sum() + (tf * probe).sum()
    loss.backward()
    ref["prompt_ctx"] = ctx.detach()
    ref["prompt_deep"] = deep[0].detach()
    ref["prompt_vis0"] = vis[0].detach()
    ref["prompt_vis1"] = vis[1].detach()
    ref["probe"] = probe
    ref["prompted_text_feature"] = tf.detach()
    ref["prompted_image_feature"] = imf.detach()
    ref["loss"] = loss.detach().reshape(1)
    ref["grad_ctx"] = ctx.grad
    ref["grad_deep"] = deep[0].grad
    ref["grad_vis0"] = vis[0].grad
    ref["grad_vis1"] = vis[1].grad
    ref["ctx_sequence"] = torch.tensor(seq, dtype=torch.int64)

    save_file({k: v.contiguous() for k, v in ref.items()}, os.path.join(HERE, "micro_reference.safetensors"))
    with open(os.path.join(HERE, "micro_reference.json"), "w") as f:
        json.dump({"texts": texts, "token_ids": ids}, f, indent=1)


def make_preprocess():
    rng = np.random.default_rng(5)
    cases = {"down": (150, 97, 64), "small": (37, 23, 16), "up": (10, 12, 16), "square": (40, 40, 16)}
    out = {}
    for name, (w, h, s) in cases.items():
        arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        img = Image.fromarray(arr, "RGB")
        if w <= h:
            rw, rh = s, int(s * h / w)
        else:
            rw, rh = int(s * w / h), s
        resized = np.asarray(img.resize((rw, rh), Image.BICUBIC))
        tf = open_clip.transform.image_transform(s, is_train=False)
        px = tf(img)
        out[name + "_input"] = torch.from_numpy(arr.astype(np.float32))
        out[name + "_resized"] = torch.from_numpy(resized.astype(np.float32))
        out[name + "_pixels"] = px.float().contiguous()
    save_file(out, os.path.join(HERE, "preprocess_reference.safetensors"))
    Image.fromarray(rng.integers(0, 256, size=(9, 7, 3), dtype=np.uint8), "RGB").save(os.path.join(HERE, "tiny.png"))


def make_tiny_reference():
    rgb = np.asarray(Image.open(os.path.join(HERE, "tiny.png")).convert("RGB"))
    with open(os.path.join(HERE, "tiny_rgb.txt"), "w") as f:
        f.write("%d %d\n" % (rgb.shape[1], rgb.shape[0]))
        f.write(" ".join(str(int(v)) for v in rgb.reshape(-1)) + "\n")


if __name__ == "__main__":
    make_micro()
    make_preprocess()
    make_tiny_reference()
