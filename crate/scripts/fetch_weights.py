#!/usr/bin/env python3
"""Downloads checkpoints into the layout the diffsim backends read.

    python3 scripts/fetch_weights.py --dest weights sd15 dinov2
    export DIFFSIM_WEIGHTS_DIR=$PWD/weights
    diffsim weights check

Layout under the destination directory:

    sd15/ and sdxl/
        unet/diffusion_pytorch_model.safetensors, unet/config.json
        vae/diffusion_pytorch_model.safetensors, vae/config.json
        scheduler/scheduler_config.json
        empty_prompt.safetensors      "context" [77, width] (+ "pooled" for sdxl)
        ip_adapter.safetensors        IP-Adapter Plus: image_proj.*, ip_adapter.*
        image_encoder/model.safetensors, image_encoder/config.json
    clip-vit/   config.json, model.safetensors   (CLIP ViT-L/14)
    dinov2/     config.json, model.safetensors   (DINOv2 base)

The U-Net is conditioned on the empty prompt, so its text embedding is
computed once here and no text encoder is needed at run time. Needs
huggingface_hub; the empty-prompt step also needs torch and transformers.
"""

import argparse
import os
import shutil
import sys
from pathlib import Path

SD = {
    "sd15": {
        "repo": "stable-diffusion-v1-5/stable-diffusion-v1-5",
        "ip_adapter": "models/ip-adapter-plus_sd15.safetensors",
        "xl": False,
    },
    "sdxl": {
        "repo": "stabilityai/stable-diffusion-xl-base-1.0",
        "ip_adapter": "sdxl_models/ip-adapter-plus_sdxl_vit-h.safetensors",
        "xl": True,
    },
}
IP_REPO = "h94/IP-Adapter"
IP_ENCODER = "models/image_encoder"
VIT = {
    "clip-vit": "openai/clip-vit-large-patch14",
    "dinov2": "facebook/dinov2-base",
}
SD_FILES = [
    "unet/diffusion_pytorch_model.safetensors",
    "unet/config.json",
    "vae/diffusion_pytorch_model.safetensors",
    "vae/config.json",
    "scheduler/scheduler_config.json",
]


def fetch(repo, filename, target, dry_run):
    if target.is_file():
        print(f"  have {target}")
        return
    print(f"  {repo}/{filename} -> {target}")
    if dry_run:
        return
    from huggingface_hub import hf_hub_download

    target.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(hf_hub_download(repo, filename), target)


def empty_prompt(repo, xl, target, dry_run):
    """Text-encoder output for the empty prompt, as the U-Net consumes it."""
    if target.is_file():
        print(f"  have {target}")
        return
    print(f"  empty-prompt embedding from {repo} -> {target}")
    if dry_run:
        return
    import torch
    from safetensors.torch import save_file
    from transformers import CLIPTextModel, CLIPTextModelWithProjection, CLIPTokenizer

    torch.set_grad_enabled(False)

    def encode(sub_tok, sub_enc, cls):
        tok = CLIPTokenizer.from_pretrained(repo, subfolder=sub_tok)
        enc = cls.from_pretrained(repo, subfolder=sub_enc).eval()
        ids = tok("", padding="max_length", max_length=tok.model_max_length, return_tensors="pt").input_ids
        return enc(ids, output_hidden_states=True)

    if xl:
        # both encoders' penultimate states side by side; pooled from the second
        one = encode("tokenizer", "text_encoder", CLIPTextModel)
        two = encode("tokenizer_2", "text_encoder_2", CLIPTextModelWithProjection)
        context = torch.cat([one.hidden_states[-2], two.hidden_states[-2]], dim=-1)[0]
        tensors = {"context": context, "pooled": two.text_embeds[0]}
    else:
        out = encode("tokenizer", "text_encoder", CLIPTextModel)
        tensors = {"context": out.last_hidden_state[0]}
    target.parent.mkdir(parents=True, exist_ok=True)
    save_file({k: v.float().contiguous() for k, v in tensors.items()}, str(target))


def fetch_sd(backend, dest, dry_run):
    spec = SD[backend]
    root = dest / backend
    for f in SD_FILES:
        fetch(spec["repo"], f, root / f, dry_run)
    empty_prompt(spec["repo"], spec["xl"], root / "empty_prompt.safetensors", dry_run)
    fetch(IP_REPO, spec["ip_adapter"], root / "ip_adapter.safetensors", dry_run)
    for f in ["model.safetensors", "config.json"]:
        fetch(IP_REPO, f"{IP_ENCODER}/{f}", root / "image_encoder" / f, dry_run)


def fetch_vit(backend, dest, dry_run):
    for f in ["model.safetensors", "config.json"]:
        fetch(VIT[backend], f, dest / backend / f, dry_run)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("backends", nargs="*", default=["sd15"], choices=[*SD, *VIT])
    p.add_argument("--dest", type=Path, default=Path(os.environ.get("DIFFSIM_WEIGHTS_DIR", "weights")))
    p.add_argument("--dry-run", action="store_true", help="print what would be fetched")
    args = p.parse_args()
    for b in args.backends:
        print(b)
        (fetch_sd if b in SD else fetch_vit)(b, args.dest, args.dry_run)
    print(f"\nexport DIFFSIM_WEIGHTS_DIR={args.dest.resolve()}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
