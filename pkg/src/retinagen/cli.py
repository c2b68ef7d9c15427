"""Command-line orchestration for the full pipeline.

Every command wraps one library operation, exits nonzero with a diagnostic
on failure, and prints the paths it wrote (one per line, ``wrote <path>``)
so scripts can consume the output.
"""

from __future__ import annotations

import json
import os

import click
import numpy as np

from . import activation, descriptors, detector, gan, metrics, perceptual, preprocess
from .archive import ModelCheckpoint


def _wrote(path):
    click.echo(f"wrote {path}")


def _load_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _feature_net(name, weights_path=None):
    if name == "toy":
        return perceptual.toy_feature_net()
    return perceptual.load_vgg19_features(weights_path=weights_path)


@click.group()
def main():
    """Lesion-descriptor extraction and controllable fundus synthesis."""


@main.command("train-detector")
@click.option("--images", required=True, type=click.Path(exists=True),
              help="Directory of training images.")
@click.option("--labels", required=True, type=click.Path(exists=True),
              help="CSV with columns image_id,grade.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="Detector config JSON; defaults to the desk config.")
@click.option("--steps", default=200, show_default=True)
@click.option("--batch-size", default=4, show_default=True)
@click.option("--lr", default=0.003, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--augment/--no-augment", default=False, show_default=True)
@click.option("--out", required=True, type=click.Path())
def train_detector_cmd(images, labels, config_path, steps, batch_size, lr, seed, augment, out):
    """Train the severity detector on an image directory plus a grade table."""
    manifest = preprocess.DatasetManifest.from_directory(images, labels_csv=labels)
    manifest.validate()
    config = (detector.DetectorConfig.from_dict(_load_json(config_path))
              if config_path else detector.desk_config())
    pairs = []
    for e in manifest.entries:
        if e.grade is None:
            raise click.ClickException(f"no grade for image {e.image_id}")
        img = preprocess.load_image(e.path)
        if img.shape[0] != config.input_size:
            raise click.ClickException(
                f"{e.image_id} is {img.shape[0]}px, config wants {config.input_size}px; "
                "run ingestion first")
        pairs.append((img, e.grade))
    aug = detector.AugmentConfig(resample=augment, stretch=augment, rotate=augment,
                                 flip=augment, color=augment)
    schedule = detector.DetectorSchedule(steps=steps, batch_size=batch_size, lr=lr,
                                         seed=seed, augment=aug)
    result = detector.train_detector(pairs, config, schedule)
    result.checkpoint.save(out)
    if result.losses:
        click.echo(f"loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    _wrote(out)


@main.command("extract-descriptors")
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--detector", "detector_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(), help="Descriptor JSON path.")
@click.option("--heatmap", type=click.Path(), help="Optional activation heat-map PNG.")
@click.option("--activations", "activations_path", type=click.Path(),
              help="Optional full activation-stack archive.")
def extract_descriptors_cmd(image_path, detector_path, out, heatmap, activations_path):
    """Back-project the detector bottleneck and extract lesion descriptors."""
    model = detector.detector_from_checkpoint(ModelCheckpoint.load(detector_path))
    image = preprocess.load_image(image_path)
    feats = detector.forward_features(image, model)
    net = activation.build_activation_net(model)
    stack = activation.project(feats, net, keep="taps")
    boxes = descriptors.locate_lesions(stack.scalar_map(0))
    dset = descriptors.extract_descriptors(
        stack, boxes, image_id=os.path.splitext(os.path.basename(image_path))[0])
    json_path, archive_path = descriptors.save_descriptor_set(dset, out)
    click.echo(f"found {len(dset)} lesions")
    _wrote(json_path)
    _wrote(archive_path)
    if heatmap:
        activation.heatmap_png(heatmap, stack.scalar_map(0))
        _wrote(heatmap)
    if activations_path:
        stack.save(activations_path)
        _wrote(activations_path)


@main.command("train-gan")
@click.option("--images", required=True, type=click.Path(exists=True))
@click.option("--vessels", required=True, type=click.Path(exists=True),
              help="Directory of vessel-mask PNGs named like the images.")
@click.option("--descriptors", "descriptors_dir", required=True, type=click.Path(exists=True),
              help="Directory of descriptor JSONs named like the images.")
@click.option("--detector", "detector_path", required=True, type=click.Path(exists=True))
@click.option("--feature-net", default="vgg19", type=click.Choice(["vgg19", "toy"]),
              show_default=True)
@click.option("--vgg-weights", type=click.Path(exists=True),
              help="Local VGG-19 state-dict file.")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="JSON with generator/discriminator/schedule settings.")
@click.option("--steps", default=300, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path())
def train_gan_cmd(images, vessels, descriptors_dir, detector_path, feature_net,
                  vgg_weights, config_path, steps, seed, out_dir):
    """Adversarially train the fundus generator on prepared triples."""
    det = detector.detector_from_checkpoint(ModelCheckpoint.load(detector_path))
    size = det.config.input_size

    triples = []
    for name in sorted(os.listdir(images)):
        if not name.lower().endswith(".png"):
            continue
        stem = os.path.splitext(name)[0]
        vessel_path = os.path.join(vessels, stem + ".png")
        dset_path = os.path.join(descriptors_dir, stem + ".json")
        if not (os.path.exists(vessel_path) and os.path.exists(dset_path)):
            raise click.ClickException(f"missing vessel mask or descriptors for {stem}")
        triples.append((preprocess.load_image(os.path.join(images, name)),
                        preprocess.load_mask(vessel_path),
                        descriptors.load_descriptor_set(dset_path)))
    if not triples:
        raise click.ClickException(f"no PNG images found in {images}")

    overrides = _load_json(config_path) if config_path else {}
    c1, c2 = _tap_channels(det.config)
    gen_cfg = gan.GeneratorConfig.from_dict({
        "image_size": size, "desc_channels": (c1, c2),
        **overrides.get("generator", {})})
    disc_cfg = gan.DiscriminatorConfig.from_dict({
        "image_size": size, **overrides.get("discriminator", {})})
    os.makedirs(out_dir, exist_ok=True)
    schedule = gan.GanSchedule(steps=steps, seed=seed,
                               checkpoint_dir=out_dir,
                               log_path=os.path.join(out_dir, "loss_log.csv"),
                               **overrides.get("schedule", {}))
    net = _feature_net(feature_net, vgg_weights)
    result = gan.train_gan(triples, gen_cfg, disc_cfg, schedule, net, det)
    gen_path = os.path.join(out_dir, "generator.ckpt")
    disc_path = os.path.join(out_dir, "discriminator.ckpt")
    result.generator.save(gen_path)
    result.discriminator.save(disc_path)
    click.echo(f"updates {result.g_updates} generator / {result.d_updates} discriminator")
    _wrote(gen_path)
    _wrote(disc_path)
    _wrote(schedule.log_path)


def _tap_channels(det_config):
    blocks = det_config.blocks
    return (blocks[1].convs[-1].channels, blocks[2].convs[-1].channels)


@main.command("generate")
@click.option("--vessel", "vessel_path", required=True, type=click.Path(exists=True))
@click.option("--descriptors", "descriptors_path", required=True, type=click.Path(exists=True))
@click.option("--generator", "generator_path", required=True, type=click.Path(exists=True))
@click.option("--seed", default=0, show_default=True)
@click.option("--fov", "fov_path", type=click.Path(exists=True),
              help="Reference FOV mask to crop the output with.")
@click.option("--out", required=True, type=click.Path())
def generate_cmd(vessel_path, descriptors_path, generator_path, seed, fov_path, out):
    """Synthesize a fundus image from a vessel mask and a descriptor set."""
    vesselm = preprocess.load_mask(vessel_path)
    dset = descriptors.load_descriptor_set(descriptors_path)
    gen_model = gan.generator_from_checkpoint(ModelCheckpoint.load(generator_path))
    z = gan.sample_noise(dim=gen_model.config.noise_dim, seed=seed)
    image = gan.generate(vesselm, dset, z, gen_model)
    if fov_path:
        image = preprocess.crop_to_fov(image, preprocess.load_mask(fov_path) > 0.5)
    preprocess.save_image(out, image)
    _wrote(out)


@main.command("manipulate")
@click.option("--descriptors", "descriptors_path", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path())
@click.option("--remove-all", is_flag=True, help="Drop every descriptor.")
@click.option("--remove", "removes", multiple=True, type=int, metavar="ID")
@click.option("--relocate", "relocates", multiple=True, metavar="ID:LEFT,TOP")
@click.option("--clone", "clones", multiple=True, metavar="ID:LEFT,TOP")
@click.option("--subset", type=float, help="Keep this fraction, sampled by --seed.")
@click.option("--multiply", "multiply_factor", type=int,
              help="Clone every descriptor up to this factor at random positions.")
@click.option("--seed", default=0, show_default=True)
def manipulate_cmd(descriptors_path, out, remove_all, removes, relocates, clones,
                   subset, multiply_factor, seed):
    """Edit a descriptor file: relocate, clone, remove, subsample, multiply."""
    dset = descriptors.load_descriptor_set(descriptors_path)
    if remove_all:
        dset = descriptors.clone_remove(dset, [("remove", i) for i in dset.ids()])
    for desc_id in removes:
        dset = descriptors.clone_remove(dset, [("remove", desc_id)])
    for spec_str in relocates:
        desc_id, left, top = _parse_edit(spec_str)
        dset = descriptors.relocate(dset, desc_id, left, top)
    for spec_str in clones:
        desc_id, left, top = _parse_edit(spec_str)
        dset = descriptors.clone_remove(dset, [("clone", desc_id, left, top)])
    if subset is not None:
        dset = descriptors.sample_subset(dset, subset, seed=seed)
    if multiply_factor is not None:
        dset = descriptors.multiply(dset, multiply_factor, seed=seed)
    json_path, archive_path = descriptors.save_descriptor_set(dset, out)
    click.echo(f"{len(dset)} descriptors")
    _wrote(json_path)
    _wrote(archive_path)


def _parse_edit(spec_str):
    try:
        id_part, pos = spec_str.split(":")
        left, top = pos.split(",")
        return int(id_part), int(left), int(top)
    except ValueError as exc:
        raise click.ClickException(f"bad edit spec {spec_str!r}, want ID:LEFT,TOP") from exc


@main.command("evaluate")
@click.option("--real", "real_dir", required=True, type=click.Path(exists=True))
@click.option("--generated", "generated_dir", required=True, type=click.Path(exists=True))
@click.option("--paired", is_flag=True, help="Sets are one-to-one by filename.")
@click.option("--embedder", default="toy", type=click.Choice(["toy", "inception"]),
              show_default=True)
@click.option("--dataset-id", default="", help="Label recorded in the report.")
@click.option("--out", required=True, type=click.Path())
def evaluate_cmd(real_dir, generated_dir, paired, embedder, dataset_id, out):
    """Score generated images against real ones (FID, and MSE when paired)."""
    def _load_dir(d):
        names = sorted(f for f in os.listdir(d) if f.lower().endswith(".png"))
        return names, [preprocess.load_image(os.path.join(d, f)) for f in names]

    real_names, real_images = _load_dir(real_dir)
    gen_names, gen_images = _load_dir(generated_dir)
    if paired and real_names != gen_names:
        raise click.ClickException("paired evaluation needs matching filenames")
    embed = metrics.toy_embedder() if embedder == "toy" else metrics.load_inception_embedder()
    report = metrics.evaluate_image_sets(real_images, gen_images, embed,
                                         dataset_id=dataset_id,
                                         method_id=f"retinagen-{embedder}", paired=paired)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        import csv as _csv

        writer = _csv.writer(fh)
        writer.writerow(["dataset_id", "method_id", "fid", "mse"])
        writer.writerow([report.dataset_id, report.method_id, report.fid,
                         "" if report.mse is None else report.mse])
    click.echo(f"fid {report.fid:.4f}" + ("" if report.mse is None
                                          else f" mse {report.mse:.6f}"))
    _wrote(out)


@main.command("serve")
@click.option("--detector", "detector_path", type=click.Path(exists=True))
@click.option("--generator", "generator_path", type=click.Path(exists=True))
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
def serve_cmd(detector_path, generator_path, host, port):
    """Run the HTTP API for extraction, generation, and severity scoring."""
    import uvicorn

    from .service import ModelRegistry, create_app

    registry = ModelRegistry()
    if detector_path:
        registry.load("detector", ModelCheckpoint.load(detector_path))
    if generator_path:
        registry.load("generator", ModelCheckpoint.load(generator_path))
    uvicorn.run(create_app(registry), host=host, port=port)


if __name__ == "__main__":
    main()
