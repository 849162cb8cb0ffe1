#!/usr/bin/env python3
"""Export the WordNet 3.0 noun hierarchy and benchmark class mappings.

Writes, into the output directory:

  noun_hypernyms.txt      "parent child" synset pairs (hypernym and
                          instance-hypernym links), ids in ImageNet's
                          n%08d form
  imagenet1k_classes.txt  the 1000 ImageNet-1k synset ids
  <bench>_classes.txt     target class names, one per line
  <bench>_mapping.txt     "class_id synset_id" lines

Inputs are the WordNet 3.0 database directory (index.noun, data.noun) and
an ImageNet-1k synset list (one wnid per line, e.g. the copy shipped with
timm as timm/data/_info/imagenet_synsets.txt).
"""

import argparse
import pathlib
import sys

# Benchmark class -> WordNet sense ("lemma.n.NN", numbered as in index.noun).
OFFICE_HOME = {
    "Alarm_Clock": "alarm_clock.n.01",
    "Backpack": "backpack.n.01",
    "Batteries": "battery.n.02",
    "Bed": "bed.n.01",
    "Bike": "bicycle.n.01",
    "Bottle": "bottle.n.01",
    "Bucket": "bucket.n.01",
    "Calculator": "calculator.n.02",
    "Calendar": "calendar.n.03",
    "Candles": "candle.n.01",
    "Chair": "chair.n.01",
    "Clipboards": "clipboard.n.01",
    "Computer": "computer.n.01",
    "Couch": "couch.n.01",
    "Curtains": "curtain.n.01",
    "Desk_Lamp": "table_lamp.n.01",
    "Drill": "drill.n.01",
    "Eraser": "eraser.n.01",
    "Exit_Sign": "sign.n.02",
    "Fan": "fan.n.01",
    "File_Cabinet": "file_cabinet.n.01",
    "Flipflops": "flip-flop.n.02",
    "Flowers": "flower.n.02",
    "Folder": "folder.n.02",
    "Fork": "fork.n.01",
    "Glasses": "glasses.n.01",
    "Hammer": "hammer.n.02",
    "Helmet": "helmet.n.02",
    "Kettle": "kettle.n.01",
    "Keyboard": "keyboard.n.01",
    "Knives": "knife.n.01",
    "Lamp_Shade": "lampshade.n.01",
    "Laptop": "laptop.n.01",
    "Marker": "marker.n.03",
    "Monitor": "monitor.n.04",
    "Mop": "mop.n.01",
    "Mouse": "mouse.n.04",
    "Mug": "mug.n.04",
    "Notebook": "notebook.n.01",
    "Oven": "oven.n.01",
    "Pan": "pan.n.01",
    "Paper_Clip": "paper_clip.n.01",
    "Pen": "pen.n.01",
    "Pencil": "pencil.n.01",
    "Postit_Notes": "post-it.n.01",
    "Printer": "printer.n.02",
    "Push_Pin": "thumbtack.n.01",
    "Radio": "radio.n.02",
    "Refrigerator": "refrigerator.n.01",
    "Ruler": "ruler.n.02",
    "Scissors": "scissors.n.01",
    "Screwdriver": "screwdriver.n.01",
    "Shelf": "shelf.n.01",
    "Sink": "sink.n.01",
    "Sneakers": "sneaker.n.01",
    "Soda": "soda.n.02",
    "Speaker": "loudspeaker.n.01",
    "Spoon": "spoon.n.01",
    "TV": "television.n.03",
    "Table": "table.n.02",
    "Telephone": "telephone.n.01",
    "ToothBrush": "toothbrush.n.01",
    "Toys": "toy.n.01",
    "Trash_Can": "trash_can.n.01",
    "Webcam": "webcam.n.01",
}

OFFICE_31 = {
    "back_pack": "backpack.n.01",
    "bike": "bicycle.n.01",
    "bike_helmet": "helmet.n.02",
    "bookcase": "bookcase.n.01",
    "bottle": "bottle.n.01",
    "calculator": "calculator.n.02",
    "desk_chair": "swivel_chair.n.01",
    "desk_lamp": "table_lamp.n.01",
    "desktop_computer": "desktop_computer.n.01",
    "file_cabinet": "file_cabinet.n.01",
    "headphones": "headphone.n.01",
    "keyboard": "keyboard.n.01",
    "laptop_computer": "laptop.n.01",
    "letter_tray": "tray.n.01",
    "mobile_phone": "mobile_phone.n.01",
    "monitor": "monitor.n.04",
    "mouse": "mouse.n.04",
    "mug": "mug.n.04",
    "paper_notebook": "notebook.n.01",
    "pen": "pen.n.01",
    "phone": "telephone.n.01",
    "printer": "printer.n.02",
    "projector": "projector.n.02",
    "punchers": "punch.n.03",
    "ring_binder": "binder.n.03",
    "ruler": "ruler.n.02",
    "scissors": "scissors.n.01",
    "speaker": "loudspeaker.n.01",
    "stapler": "stapler.n.01",
    "tape_dispenser": "dispenser.n.01",
    "trash_can": "trash_can.n.01",
}

VISDA_C = {
    "aeroplane": "airplane.n.01",
    "bicycle": "bicycle.n.01",
    "bus": "bus.n.01",
    "car": "car.n.01",
    "horse": "horse.n.01",
    "knife": "knife.n.01",
    "motorcycle": "motorcycle.n.01",
    "person": "person.n.01",
    "plant": "plant.n.02",
    "skateboard": "skateboard.n.01",
    "train": "train.n.01",
    "truck": "truck.n.01",
}

BENCHMARKS = {"officehome": OFFICE_HOME, "office31": OFFICE_31, "visda": VISDA_C}


def read_index(path):
    senses = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith(" "):
                continue
            fields = line.split()
            synset_count = int(fields[2])
            senses[fields[0]] = fields[-synset_count:]
    return senses


def read_hypernym_edges(path):
    edges = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.startswith(" "):
                continue
            fields = line.split("|", 1)[0].split()
            offset = fields[0]
            word_count = int(fields[3], 16)
            pos = 4 + 2 * word_count
            pointer_count = int(fields[pos])
            pos += 1
            for _ in range(pointer_count):
                symbol, target, target_pos = fields[pos], fields[pos + 1], fields[pos + 2]
                pos += 4
                if symbol in ("@", "@i") and target_pos == "n":
                    edges.append(("n" + target, "n" + offset))
    return edges


def sense_to_wnid(sense, index):
    lemma, pos, number = sense.rsplit(".", 2)
    if pos != "n":
        raise ValueError(f"{sense}: only noun senses are supported")
    offsets = index.get(lemma.lower())
    if offsets is None or int(number) > len(offsets):
        raise ValueError(f"{sense}: no such sense in index.noun")
    return "n" + offsets[int(number) - 1]


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--wordnet-dir", required=True, type=pathlib.Path, help="WordNet 3.0 dict directory")
    parser.add_argument("--imagenet-synsets", required=True, type=pathlib.Path, help="ImageNet-1k wnid list")
    parser.add_argument("--out", required=True, type=pathlib.Path)
    args = parser.parse_args()

    index = read_index(args.wordnet_dir / "index.noun")
    edges = read_hypernym_edges(args.wordnet_dir / "data.noun")
    nodes = {n for e in edges for n in e}
    args.out.mkdir(parents=True, exist_ok=True)

    with open(args.out / "noun_hypernyms.txt", "w", encoding="utf-8") as f:
        f.write("# WordNet 3.0 noun hypernym links: parent child\n")
        for parent, child in sorted(set(edges)):
            f.write(f"{parent} {child}\n")

    imagenet = [w.strip() for w in args.imagenet_synsets.read_text().split() if w.strip()]
    missing = [w for w in imagenet if w not in nodes]
    if missing:
        sys.exit(f"ImageNet synsets absent from the hierarchy: {missing[:5]}")
    (args.out / "imagenet1k_classes.txt").write_text("\n".join(imagenet) + "\n")

    for name, mapping in BENCHMARKS.items():
        (args.out / f"{name}_classes.txt").write_text("\n".join(mapping) + "\n")
        with open(args.out / f"{name}_mapping.txt", "w", encoding="utf-8") as f:
            for cls, sense in mapping.items():
                f.write(f"{cls} {sense_to_wnid(sense, index)}  # {sense}\n")

    print(f"{len(nodes)} synsets, {len(set(edges))} links, {len(imagenet)} ImageNet classes")


if __name__ == "__main__":
    main()
