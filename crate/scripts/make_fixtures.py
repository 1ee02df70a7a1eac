#!/usr/bin/env python3
"""Writes tiny randomly initialised reference models and their outputs.

The Rust ports of the U-Net, VAE encoder, vision transformers and the
IP-Adapter resampler are checked against these files by
crates/backends/tests/reference_models.rs. Re-run after changing the
reference library versions:

    python3 scripts/make_fixtures.py crates/backends/tests/fixtures
"""

import argparse
import json
from pathlib import Path

import torch
from diffusers import AutoencoderKL, UNet2DConditionModel
from safetensors.torch import save_file
from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection, Dinov2Config, Dinov2Model

torch.manual_seed(0)
torch.set_grad_enabled(False)


def randomize(module, std=0.2):
    """Replaces every parameter with noise so that no layer is an identity."""
    g = torch.Generator().manual_seed(1234)
    for name, p in module.named_parameters():
        if name.endswith("weight") and p.ndim == 1 or "norm" in name and name.endswith("weight"):
            p.copy_(1.0 + 0.1 * torch.randn(p.shape, generator=g))
        else:
            p.copy_(std * torch.randn(p.shape, generator=g))


def save_config(model, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = model.config
    data = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    path.write_text(json.dumps(data, indent=1, default=str))


def contiguous(d):
    return {k: v.detach().contiguous().float() for k, v in d.items()}


class Recorder:
    """Records the outputs of selected linear layers."""

    def __init__(self):
        self.out = {}
        self.handles = []

    def watch(self, module, name):
        def hook(_m, _i, o):
            self.out[name] = o.detach().reshape(-1, o.shape[-1]).clone()

        self.handles.append(module.register_forward_hook(hook))

    def clear(self):
        for h in self.handles:
            h.remove()
        self.handles = []
        self.out = {}


def vae_fixture(root):
    vae = AutoencoderKL(
        in_channels=3,
        out_channels=3,
        down_block_types=("DownEncoderBlock2D", "DownEncoderBlock2D", "DownEncoderBlock2D"),
        up_block_types=("UpDecoderBlock2D", "UpDecoderBlock2D", "UpDecoderBlock2D"),
        block_out_channels=(16, 32, 32),
        layers_per_block=2,
        latent_channels=4,
        norm_num_groups=8,
        scaling_factor=0.18215,
    ).eval()
    randomize(vae, 0.1)
    save_config(vae, root / "vae" / "config.json")
    save_file(contiguous(vae.state_dict()), root / "vae" / "diffusion_pytorch_model.safetensors")
    x = torch.rand(1, 3, 40, 48) * 2 - 1
    mean = vae.encode(x).latent_dist.mean * vae.config.scaling_factor
    save_file({"pixels": x[0].contiguous(), "latent": mean[0].contiguous()}, root / "vae_io.safetensors")


def image_encoder(root):
    cfg = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=3,
        num_attention_heads=4,
        image_size=224,
        patch_size=32,
        projection_dim=16,
        hidden_act="gelu",
    )
    enc = CLIPVisionModelWithProjection(cfg).eval()
    randomize(enc, 0.2)
    (root / "image_encoder").mkdir(parents=True, exist_ok=True)
    (root / "image_encoder" / "config.json").write_text(cfg.to_json_string())
    save_file(contiguous(enc.state_dict()), root / "image_encoder" / "model.safetensors")
    return enc


def resampler_state(embed_dim, cross_dim, g):
    dim, depth, queries, mult = 64, 4, 4, 4
    sd = {
        "latents": torch.randn(1, queries, dim, generator=g) / dim**0.5,
        "proj_in.weight": 0.2 * torch.randn(dim, embed_dim, generator=g),
        "proj_in.bias": 0.1 * torch.randn(dim, generator=g),
        "proj_out.weight": 0.2 * torch.randn(cross_dim, dim, generator=g),
        "proj_out.bias": 0.1 * torch.randn(cross_dim, generator=g),
        "norm_out.weight": 1 + 0.1 * torch.randn(cross_dim, generator=g),
        "norm_out.bias": 0.1 * torch.randn(cross_dim, generator=g),
    }
    for i in range(depth):
        a, f = f"layers.{i}.0", f"layers.{i}.1"
        for n in ("norm1", "norm2"):
            sd[f"{a}.{n}.weight"] = 1 + 0.1 * torch.randn(dim, generator=g)
            sd[f"{a}.{n}.bias"] = 0.1 * torch.randn(dim, generator=g)
        sd[f"{a}.to_q.weight"] = 0.2 * torch.randn(dim, dim, generator=g)
        sd[f"{a}.to_kv.weight"] = 0.2 * torch.randn(2 * dim, dim, generator=g)
        sd[f"{a}.to_out.weight"] = 0.2 * torch.randn(dim, dim, generator=g)
        sd[f"{f}.0.weight"] = 1 + 0.1 * torch.randn(dim, generator=g)
        sd[f"{f}.0.bias"] = 0.1 * torch.randn(dim, generator=g)
        sd[f"{f}.1.weight"] = 0.2 * torch.randn(dim * mult, dim, generator=g)
        sd[f"{f}.3.weight"] = 0.2 * torch.randn(dim, dim * mult, generator=g)
    return sd


def adapter_state(unet, g):
    """Original IP-Adapter layout: modules numbered over all attention
    processors, cross-attention ones taking the odd indices."""
    sd, key = {}, 1
    order = []
    for name in unet.attn_processors.keys():
        if name.endswith("attn1.processor"):
            continue
        attn = unet.get_submodule(name[: -len(".processor")])
        inner, cross = attn.to_k.weight.shape
        sd[f"{key}.to_k_ip.weight"] = 0.2 * torch.randn(inner, cross, generator=g)
        sd[f"{key}.to_v_ip.weight"] = 0.2 * torch.randn(inner, cross, generator=g)
        order.append(name)
        key += 2
    return sd, order


def unet_fixture(root, name, xl, enc):
    common = dict(
        sample_size=16,
        in_channels=4,
        out_channels=4,
        layers_per_block=1,
        norm_num_groups=4,
        cross_attention_dim=32,
    )
    if xl:
        unet = UNet2DConditionModel(
            block_out_channels=(16, 32),
            down_block_types=("DownBlock2D", "CrossAttnDownBlock2D"),
            up_block_types=("CrossAttnUpBlock2D", "UpBlock2D"),
            attention_head_dim=(2, 4),
            transformer_layers_per_block=(1, 2),
            use_linear_projection=True,
            addition_embed_type="text_time",
            addition_time_embed_dim=8,
            projection_class_embeddings_input_dim=16 + 6 * 8,
            **common,
        ).eval()
    else:
        unet = UNet2DConditionModel(
            block_out_channels=(16, 32, 32),
            down_block_types=("CrossAttnDownBlock2D", "CrossAttnDownBlock2D", "DownBlock2D"),
            up_block_types=("UpBlock2D", "CrossAttnUpBlock2D", "CrossAttnUpBlock2D"),
            attention_head_dim=4,
            **common,
        ).eval()
    randomize(unet, 0.15)
    d = root / name
    save_config(unet, d / "unet" / "config.json")
    save_file(contiguous(unet.state_dict()), d / "unet" / "diffusion_pytorch_model.safetensors")

    g = torch.Generator().manual_seed(99 if xl else 98)
    image_proj = resampler_state(enc.config.hidden_size, 32, g)
    ip, order = adapter_state(unet, g)
    flat = {f"image_proj.{k}": v for k, v in image_proj.items()}
    flat.update({f"ip_adapter.{k}": v for k, v in ip.items()})
    save_file(contiguous(flat), d / "ip_adapter.safetensors")

    context = torch.randn(1, 7, 32, generator=g)
    prompt = {"context": context[0]}
    added = None
    if xl:
        pooled = torch.randn(1, 16, generator=g)
        prompt["pooled"] = pooled[0]
        added = {"text_embeds": pooled, "time_ids": torch.tensor([[64.0, 64.0, 0.0, 0.0, 64.0, 64.0]])}
    save_file(contiguous(prompt), d / "empty_prompt.safetensors")

    # image tokens through diffusers' own adapter loader
    unet._load_ip_adapter_weights([{"image_proj": image_proj, "ip_adapter": ip}], low_cpu_mem_usage=False)
    unet.eval()
    pixels = torch.randn(1, 3, 224, 224, generator=torch.Generator().manual_seed(224))
    features = enc(pixels, output_hidden_states=True).hidden_states[-2]
    tokens = unet.encoder_hid_proj.image_projection_layers[0](features)

    x = torch.randn(1, 4, 16, 16, generator=g)
    t = 500
    rec = Recorder()
    io = {
        "x": x[0],

        "image_tokens": tokens.reshape(-1, tokens.shape[-1]),
    }
    targets = {}
    for pname in order:
        attn_name = pname[: -len(".attn2.processor")]
        targets[attn_name] = unet.get_submodule(attn_name)
    for i, (attn_name, block) in enumerate(targets.items()):
        rec.watch(block.attn1.to_q, f"self{i}.q")
        rec.watch(block.attn1.to_k, f"self{i}.k")
        rec.watch(block.attn1.to_v, f"self{i}.v")
        rec.watch(block.attn2.to_q, f"cross{i}.q")
        rec.watch(block.attn2.processor.to_k_ip[0], f"cross{i}.k")
        rec.watch(block.attn2.processor.to_v_ip[0], f"cross{i}.v")
    kwargs = {"image_embeds": [features.unsqueeze(1)]}
    if added:
        kwargs.update(added)
    out = unet(x, t, encoder_hidden_states=context, added_cond_kwargs=kwargs).sample
    io["eps"] = out[0]
    io.update(rec.out)
    rec.clear()
    # the same pass with image tokens switched off by zero scale
    for p in unet.attn_processors.values():
        if hasattr(p, "scale"):
            p.scale = [0.0]
    io["eps_no_ip"] = unet(x, t, encoder_hidden_states=context, added_cond_kwargs=kwargs).sample[0]
    save_file(contiguous(io), d / "unet_io.safetensors")
    (d / "transformer_blocks.json").write_text(json.dumps(list(targets.keys()), indent=1))


def vit_fixtures(root, enc):
    pixels = torch.randn(1, 3, 224, 224, generator=torch.Generator().manual_seed(224))
    hs = enc(pixels, output_hidden_states=True).hidden_states
    save_file(contiguous({"pixels": pixels[0], "penultimate": hs[-2][0]}), root / "image_encoder_io.safetensors")

    # a small CLIP at its native grid and at an interpolated one
    cfg = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=4,
        image_size=32,
        patch_size=8,
        hidden_act="quick_gelu",
    )
    clip = CLIPVisionModelWithProjection(cfg).eval()
    randomize(clip, 0.2)
    d = root / "clip"
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json_string())
    save_file(contiguous(clip.state_dict()), d / "model.safetensors")
    rec = Recorder()
    io = {}
    for res in (32, 48):
        px = torch.randn(1, 3, res, res, generator=torch.Generator().manual_seed(res))
        layer = clip.vision_model.encoder.layers[1].self_attn
        rec.watch(layer.q_proj, f"{res}.q")
        rec.watch(layer.k_proj, f"{res}.k")
        rec.watch(layer.v_proj, f"{res}.v")
        hs = clip(px, output_hidden_states=True, interpolate_pos_encoding=True).hidden_states
        io[f"{res}.pixels"] = px[0]
        io[f"{res}.hidden1"] = hs[1][0]
        io.update(rec.out)
        rec.clear()
    save_file(contiguous(io), d / "io.safetensors")

    for swiglu in (False, True):
        cfg = Dinov2Config(
            hidden_size=32,
            num_hidden_layers=2,
            num_attention_heads=4,
            mlp_ratio=4,
            patch_size=8,
            image_size=32,
            use_swiglu_ffn=swiglu,
        )
        model = Dinov2Model(cfg).eval()
        randomize(model, 0.2)
        d = root / ("dinov2_swiglu" if swiglu else "dinov2")
        d.mkdir(parents=True, exist_ok=True)
        (d / "config.json").write_text(cfg.to_json_string())
        save_file(contiguous(model.state_dict()), d / "model.safetensors")
        io = {}
        for res in (32, 48):
            px = torch.randn(1, 3, res, res, generator=torch.Generator().manual_seed(res))
            att = model.encoder.layer[1].attention.attention
            rec.watch(att.query, f"{res}.q")
            rec.watch(att.key, f"{res}.k")
            rec.watch(att.value, f"{res}.v")
            hs = model(px, output_hidden_states=True).hidden_states
            io[f"{res}.pixels"] = px[0]
            io[f"{res}.hidden1"] = hs[1][0]
            io.update(rec.out)
            rec.clear()
        save_file(contiguous(io), d / "io.safetensors")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    args = ap.parse_args()
    root = args.out
    root.mkdir(parents=True, exist_ok=True)
    vae_fixture(root)
    enc = image_encoder(root)
    vit_fixtures(root, enc)
    for name, xl in (("sd", False), ("sdxl", True)):
        unet_fixture(root, name, xl, enc)


if __name__ == "__main__":
    main()
