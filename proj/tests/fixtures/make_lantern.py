"""Regenerates the lantern fixture dataset (behavior only, with raw rating distributions)."""
import json
import pathlib

SENTENCES = [
    "Mira found an old tin lantern under the stairs of her grandmother's house.",
    "When she wiped away the dust, a faint blue glow flickered inside the glass.",
    "She carried it into the garden, where the evening was already turning cold.",
    "The glow grew brighter and drew a narrow path of light across the wet grass.",
    "Mira followed the path to the edge of the pond and heard something splash.",
    "A small grey heron stood tangled in a fishing line, beating one wing against the reeds.",
    "Her hands shook as she knelt beside it and began to loosen the knots.",
    "The line cut into her fingers, and for a moment she wanted to give up.",
    "At last the heron pulled free, shook its feathers, and waded into the shallows.",
    "The lantern dimmed to a gentle ember, as if it were resting.",
    "Mira walked home smiling, the warm tin cradled against her chest.",
]
CONCEPTS = ["happiness", "sadness", "fear", "anger"]
# Intended ratings on the 0-10 scale; the raw distribution spreads mass over two neighbours.
TARGET = [
    [6.0, 1.5, 1.0, 0.5],
    [6.5, 1.0, 2.5, 0.5],
    [5.5, 2.0, 2.0, 0.5],
    [7.0, 1.0, 2.0, 0.5],
    [5.0, 1.5, 4.0, 0.5],
    [2.5, 5.5, 5.5, 1.5],
    [2.5, 4.5, 6.5, 1.0],
    [1.5, 5.0, 5.0, 3.5],
    [7.5, 1.5, 1.5, 0.5],
    [6.5, 2.0, 1.0, 0.0],
    [9.0, 0.5, 0.0, 0.0],
]


def distribution(rating):
    lo = int(rating)
    p = [0.0] * 11
    frac = rating - lo
    if lo >= 10:
        p[10] = 1.0
    else:
        p[lo] = 1.0 - frac
        p[lo + 1] += frac
    return p


def expected(p):
    return sum(i * pi for i, pi in enumerate(p)) / 10.0


root = pathlib.Path(__file__).parent / "lantern"
root.mkdir(exist_ok=True)
story_id = "lantern"
(root / "stories.jsonl").write_text(json.dumps({"story_id": story_id, "sentences": SENTENCES}) + "\n")
lines = []
for t, row in enumerate(TARGET, start=1):
    raw = {c: distribution(v) for c, v in zip(CONCEPTS, row)}
    beliefs = {c: expected(raw[c]) for c in CONCEPTS}
    lines.append(json.dumps({"story_id": story_id, "t": t, "beliefs": {"emotions": beliefs}, "raw": {"emotions": raw}}))
(root / "behavior.jsonl").write_text("\n".join(lines) + "\n")
manifest = {
    "format_version": "1",
    "model_id": "hand-rated",
    "hidden_dim": 0,
    "layers": [],
    "domains": {"emotions": CONCEPTS},
    "n_stories": 1,
    "split": "test",
    "checksums": {},
}
(root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
