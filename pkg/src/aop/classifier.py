"""The 8-class disease classifier: a VGG-16-shaped conv stack with a reduced
fully connected head (1024 -> 32 -> 8), its fine-tuning loop, and prediction.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .aop_net import CHECKPOINT_VERSION, TrainingDiverged, _dump_divergence
from .augment import augment_for_classifier
from .config import CLASS_NAMES, AugmentationRecipe, ClassifierSpec, TrainConfigCls
from .data import LabeledExample

log = logging.getLogger(__name__)

# 13 conv layers in 5 blocks; 'M' = 2x2 max pool
VGG16_LAYOUT = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def _scaled(c: int, width_mult: float) -> int:
    return max(8, int(round(c * width_mult)))


class VGGClassifier(nn.Module):
    """Conv backbone + FC head emitting an 8-way probability vector.

    `forward` returns softmax probabilities; `logit_scores` exposes the
    pre-softmax values for the loss and for attribution.
    """

    def __init__(self, spec: ClassifierSpec):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        cin = 3
        for entry in VGG16_LAYOUT:
            if entry == "M":
                layers.append(nn.MaxPool2d(2, 2))
            else:
                cout = _scaled(int(entry), spec.width_mult)
                layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
                cin = cout
        self.features = nn.Sequential(*layers)
        feat_side = spec.input_size // 32
        flat = cin * feat_side * feat_side
        head: list[nn.Module] = [nn.Flatten()]
        hin = flat
        for hdim in spec.head_dims:
            head += [nn.Linear(hin, hdim), nn.ReLU(inplace=True)]
            hin = hdim
        head.append(nn.Linear(hin, spec.n_classes))
        self.head = nn.Sequential(*head)

    @property
    def last_conv(self) -> nn.Conv2d:
        return [m for m in self.features if isinstance(m, nn.Conv2d)][-1]

    def logit_scores(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if (h, w) != (self.spec.input_size, self.spec.input_size):
            raise ValueError(
                f"expected {self.spec.input_size}x{self.spec.input_size} input, got {h}x{w}"
            )
        return self.head(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logit_scores(x), dim=1)


def _init_classifier_weights(net: nn.Module, gen: torch.Generator) -> None:
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
            m.weight.data.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
        elif isinstance(m, nn.Linear):
            m.weight.data.normal_(0.0, (2.0 / m.in_features) ** 0.5, generator=gen)
            m.bias.data.zero_()


def build_classifier(spec: ClassifierSpec, init_seed: int = 0) -> VGGClassifier:
    """Head is always freshly initialized; the conv stack optionally loads
    pretrained weights from a state-dict file."""
    net = VGGClassifier(spec)
    gen = torch.Generator().manual_seed(init_seed)
    _init_classifier_weights(net, gen)
    if spec.init == "pretrained":
        state = torch.load(spec.pretrained_weights, map_location="cpu", weights_only=True)
        conv_state = {k: v for k, v in state.items() if k.startswith("features.")}
        own = net.state_dict()
        mismatches = [
            f"{k}: file {tuple(v.shape)} vs model {tuple(own[k].shape) if k in own else 'missing'}"
            for k, v in conv_state.items()
            if k not in own or own[k].shape != v.shape
        ]
        if mismatches or not conv_state:
            raise ValueError(
                "pretrained weights incompatible with conv stack:\n  "
                + "\n  ".join(mismatches or ["no features.* keys found"])
            )
        net.load_state_dict(conv_state, strict=False)
    return net


def _examples_to_batch(
    examples: list[LabeledExample],
    recipe: AugmentationRecipe | None,
    rng: np.random.Generator | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    imgs = []
    for ex in examples:
        img = ex.image if recipe is None else augment_for_classifier(ex, recipe, rng)
        imgs.append(img)
    x = torch.from_numpy(np.stack(imgs).astype(np.float32)).permute(0, 3, 1, 2)
    y = torch.tensor([ex.label_index for ex in examples], dtype=torch.long)
    return x, y


def _with_pretreated(examples: list[LabeledExample], pretreat_fn) -> list[LabeledExample]:
    """Pretreatment is deterministic (eval mode), so applying it once up
    front is equivalent to applying it per draw; augmentation still runs
    online afterward, keeping its statistics identical to the raw arm."""
    if pretreat_fn is None:
        return examples
    images = pretreat_fn.batch([ex.image for ex in examples])
    return [
        dataclasses.replace(ex, image=img) for ex, img in zip(examples, images)
    ]


@torch.no_grad()
def evaluate_accuracy(
    model: VGGClassifier, examples: list[LabeledExample], device: str = "cpu", chunk: int = 64
) -> float:
    model.eval()
    dev = torch.device(device)
    correct = 0
    for lo in range(0, len(examples), chunk):
        block = examples[lo : lo + chunk]
        x, y = _examples_to_batch(block, None, None)
        pred = model.logit_scores(x.to(dev)).argmax(dim=1).cpu()
        correct += int((pred == y).sum())
    return correct / len(examples)


@torch.no_grad()
def predict_batch(
    model: VGGClassifier, images: list[np.ndarray], device: str = "cpu", chunk: int = 64
) -> tuple[list[str], np.ndarray]:
    model.eval()
    dev = torch.device(device)
    probs = []
    for lo in range(0, len(images), chunk):
        x = torch.from_numpy(np.stack(images[lo : lo + chunk]).astype(np.float32)).permute(0, 3, 1, 2)
        probs.append(model(x.to(dev)).cpu().numpy())
    p = np.concatenate(probs)
    labels = [CLASS_NAMES[i] for i in p.argmax(axis=1)]
    return labels, p


def train_classifier(
    train: list[LabeledExample],
    val: list[LabeledExample],
    cfg: TrainConfigCls,
    *,
    spec: ClassifierSpec | None = None,
    recipe: AugmentationRecipe | None = None,
    pretreat_fn=None,
    pretreat_tag: str | None = None,
    device: str = "cpu",
    init_seed: int = 0,
    augment_seed: int = 0,
    shuffle_seed: int = 0,
    out_dir: str | Path | None = None,
    config_hash: str = "",
    log_every: int = 1,
) -> dict:
    """Momentum-SGD fine-tuning with cross-entropy; retains the
    best-validation-accuracy weights. Returns a checkpoint dict.

    `pretreat_tag` records the pretreatment variant when the caller supplies
    already-pretreated examples instead of a pretreat_fn."""
    if not train:
        raise ValueError("no training examples")
    spec = spec or ClassifierSpec()
    dev = torch.device(device)

    if pretreat_fn is not None:
        pretreat_tag = pretreat_fn.variant_name
    train = _with_pretreated(train, pretreat_fn)
    val = _with_pretreated(val, pretreat_fn)

    model = build_classifier(spec, init_seed).to(dev)
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rng_aug = np.random.default_rng([augment_seed])
    rng_shuffle = np.random.default_rng([shuffle_seed])
    aug_recipe = recipe if cfg.augment else None

    csv_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tag = pretreat_tag or "none"
        csv_path = out_dir / f"classifier_{tag}_metrics.csv"
        with open(csv_path, "w", newline="") as fh:
            fh.write(f"# config_hash={config_hash}\n")
            csv.writer(fh).writerow(["epoch", "train_acc", "val_acc", "loss"])

    best_val, best_state, best_epoch = -1.0, None, 0
    n = len(train)
    t0 = time.time()
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng_shuffle.permutation(n)
        loss_sum, correct, seen = 0.0, 0, 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x, y = _examples_to_batch([train[i] for i in idx], aug_recipe, rng_aug)
            x, y = x.to(dev), y.to(dev)
            opt.zero_grad(set_to_none=True)
            logits = model.logit_scores(x)
            loss = F.cross_entropy(logits, y)
            loss.backward()
            opt.step()
            if not torch.isfinite(loss):
                dump = _dump_divergence(
                    out_dir, {"epoch": epoch, "loss": float(loss), "model_state": model.state_dict()}
                )
                raise TrainingDiverged(f"non-finite classifier loss at epoch {epoch}", dump)
            loss_sum += float(loss) * len(idx)
            correct += int((logits.argmax(dim=1) == y).sum())
            seen += len(idx)

        train_acc = correct / seen
        val_acc = evaluate_accuracy(model, val, device) if val else train_acc
        if val_acc >= best_val:
            best_val, best_epoch = val_acc, epoch
            best_state = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
        if csv_path is not None:
            with open(csv_path, "a", newline="") as fh:
                csv.writer(fh).writerow(
                    [epoch, f"{train_acc:.6f}", f"{val_acc:.6f}", f"{loss_sum / seen:.6f}"]
                )
        if epoch % log_every == 0:
            log.info(
                "classifier[%s] epoch %d/%d train=%.3f val=%.3f loss=%.4f (%.1fs)",
                pretreat_tag or "none",
                epoch, cfg.epochs, train_acc, val_acc, loss_sum / seen, time.time() - t0,
            )

    return {
        "version": CHECKPOINT_VERSION,
        "kind": "classifier",
        "classifier_spec": dataclasses.asdict(spec),
        "pretreat_variant": pretreat_tag,
        "epoch": cfg.epochs,
        "best_epoch": best_epoch,
        "best_val_accuracy": best_val,
        "config_hash": config_hash,
        "model_state": best_state,
        "class_names": list(CLASS_NAMES),
    }


def load_classifier(ckpt: dict, device: str = "cpu") -> VGGClassifier:
    if ckpt.get("kind") != "classifier":
        raise ValueError("not a classifier checkpoint")
    spec = ClassifierSpec(**{**ckpt["classifier_spec"], "init": "random", "pretrained_weights": None})
    model = VGGClassifier(spec).to(torch.device(device))
    model.load_state_dict(ckpt["model_state"])
    model.eval()
    return model


def predict(
    img: np.ndarray, ckpt: dict, pretreat_fn=None, device: str = "cpu"
) -> tuple[str, np.ndarray]:
    """Predict one image. The pretreatment must match the one recorded at
    training time; a mismatch is a protocol violation."""
    trained_with = ckpt.get("pretreat_variant")
    offered = pretreat_fn.variant_name if pretreat_fn is not None else None
    if trained_with != offered:
        raise ValueError(
            f"pretreatment mismatch: checkpoint trained with {trained_with!r}, "
            f"predict called with {offered!r}"
        )
    if pretreat_fn is not None:
        img = pretreat_fn(img)
    model = load_classifier(ckpt, device)
    labels, probs = predict_batch(model, [img], device)
    return labels[0], probs[0]
