"""End-to-end clinical-schema pipeline on a fabricated pocket dataset.

The script renders lesion images with the synthetic generator, then writes a
manifest in the Fitzpatrick17k schema (md5hash / label / fitzpatrick_scale)
whose labels are real clinical diagnosis strings and whose tone column mixes
the annotation styles found in the wild (integers, roman numerals, "FST4",
and the -1 unknown marker). It walks the full path a real dataset takes:

  manifest -> load_manifest (harmonization + rejection log)
           -> tone distribution audit table
           -> task filter + stratified split
           -> short baseline training run
           -> per-group evaluation and fairness report

Run:  python3 demos/05_clinical_pipeline.py    (~1 minute on CPU)
Artifacts land in demos/_out/05_clinical_pipeline/.
"""

import csv
from pathlib import Path

from dermfair.backbones import BackboneFamily, BackboneSpec, load_backbone
from dermfair.ingest import load_manifest, tone_distribution_table
from dermfair.metrics import build_report
from dermfair.models import ModelConfig, Variant
from dermfair.records import Condition, DataSource, records_for_task
from dermfair.splits import stratified_split
from dermfair.synthetic import SyntheticSpec, generate
from dermfair.training import TrainConfig, evaluate, prepare_training_data, train

OUT = Path(__file__).resolve().parent / "_out" / "05_clinical_pipeline"

#: Rendered class -> clinical diagnosis strings to cycle through. Both
#: malignant labels harmonize to the cancer task's positive class, both
#: benign ones to the negative class.
DIAGNOSES = {
    Condition.MALIGNANT: ("melanoma", "basal cell carcinoma"),
    Condition.BENIGN: ("melanocytic nevus", "dermatofibroma"),
}

#: Tone annotation styles seen across real manifests.
TONE_STYLES = (
    lambda t: str(t),              # plain integer
    lambda t: ["i", "ii", "iii", "iv", "v", "vi"][t - 1].upper(),  # roman
    lambda t: f"FST{t}",           # prefixed
)


def fabricate_clinic(out_dir: Path):
    """Render images, then write a Fitzpatrick17k-schema manifest for them."""
    spec = SyntheticSpec(n_per_cell=12, rho=0.0, seed=42, image_size=32)
    rendered = generate(spec, out_dir)

    rows = []
    for i, rec in enumerate(rendered):
        labels = DIAGNOSES[rec.condition]
        rows.append(
            {
                "md5hash": rec.image_id,
                "label": labels[i % len(labels)],
                "fitzpatrick_scale": TONE_STYLES[i % len(TONE_STYLES)](rec.tone),
            }
        )
    # Rows that real manifests contain and the loader must reject, loudly:
    rows.append({"md5hash": rows[0]["md5hash"] + "_unknown_tone",
                 "label": "melanoma", "fitzpatrick_scale": "-1"})
    rows.append({"md5hash": rows[1]["md5hash"],  # image exists
                 "label": "acne vulgaris", "fitzpatrick_scale": "3"})
    rows.append({"md5hash": "deadbeef" * 4,  # image does not exist
                 "label": "melanoma", "fitzpatrick_scale": "2"})

    manifest = out_dir / "clinic_manifest.csv"
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["md5hash", "label", "fitzpatrick_scale"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest, out_dir / "images"


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    manifest, image_dir = fabricate_clinic(OUT)
    print(f"manifest: {manifest} ({sum(1 for _ in open(manifest)) - 1} rows)")

    records, log = load_manifest(DataSource.FITZPATRICK17K, manifest, image_dir=image_dir)
    print(f"loaded {len(records)} records; rejections: {log.counts()}\n")

    table = tone_distribution_table(records)
    print(table.to_string(index=False), "\n")

    task_records = records_for_task(records, "cancer")
    split = stratified_split(task_records, seed=0)
    print(f"cancer task: {len(task_records)} records -> "
          f"train {len(split.train)} / val {len(split.val)} / test {len(split.test)}\n")

    backbone_spec = BackboneSpec(
        family=BackboneFamily.SMALL_CNN, trainable=True, embedding_dim=64
    )
    model_config = ModelConfig.defaults_for(Variant.BASELINE, num_classes=2, num_tone_groups=6)
    train_config = TrainConfig(
        model=model_config,
        backbone=backbone_spec,
        task="cancer",
        epochs=3,
        batch_size=16,
        seed=0,
        image_size=32,
    )
    backbone = load_backbone(backbone_spec, seed=0)
    result = train(train_config, split, backbone, run_dir=OUT / "run")
    final = result.history[-1]
    print(f"trained {len(result.history)} epochs; "
          f"final train loss {final['train']['total']:.4f}, val BA {final['val_ba']:.3f}")

    data = prepare_training_data(split.test, "cancer", train_config, backbone)
    predictions = evaluate(result.model, data)
    report = build_report(
        predictions, task="cancer", backbone="small_cnn", variant="baseline",
        eval_set="internal",
    )
    print(f"\ntest fairness report ({report.n_records} records):")
    print(f"  balanced accuracy = {float(report.balanced_accuracy):.3f}")
    print(f"  EOM = {report.eom:.3f}   PQD = {report.pqd:.3f}")
    print(f"  per-group BA: { {g: round(v, 3) for g, v in report.ba_by_group.items()} }")
    report.save(OUT / "report_internal.json")
    print(f"\nreport -> {OUT / 'report_internal.json'}")


if __name__ == "__main__":
    main()
