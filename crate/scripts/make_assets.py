#!/usr/bin/env python3
"""Regenerates assets/: the bundled toy pretraining corpus and the
miniature task files. Deterministic; run from anywhere:

    python3 scripts/make_assets.py

The corpus is 1,000 template sentences (documents of 8 lines separated by
blank lines) built from strongly correlated word pools, so a small model
can learn it in minutes, plus ~1,000 one-off names and trade goods that
push the built vocabulary toward 2k pieces. The task files reuse the same
pools so fine-tuning stays in-vocabulary."""

import random
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
ASSETS = ROOT / "assets"

PLACES = [
    "harbor", "orchard", "library", "foundry", "market", "chapel", "granary",
    "smithy", "tavern", "bridge", "mill", "quarry", "garden", "stable",
    "archive", "workshop", "wharf", "tower", "cellar", "meadow",
]
DAYS = ["monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"]

# (adjective, noun, verb): each noun keeps one adjective and one verb, so a
# masked slot is recoverable from its neighbors.
CLUSTERS = [
    ("amber", "lantern", "glows"), ("heavy", "anvil", "rings"),
    ("quiet", "loom", "clicks"), ("swift", "ferry", "crosses"),
    ("rusty", "gate", "creaks"), ("pale", "candle", "flickers"),
    ("stout", "barrel", "leaks"), ("sleek", "otter", "dives"),
    ("weary", "miller", "rests"), ("bright", "kettle", "whistles"),
    ("crooked", "fence", "leans"), ("gentle", "mare", "grazes"),
    ("salty", "breeze", "drifts"), ("golden", "wheat", "sways"),
    ("silent", "owl", "watches"), ("busy", "clerk", "writes"),
    ("frozen", "pond", "cracks"), ("dusty", "ledger", "fades"),
    ("narrow", "alley", "twists"), ("proud", "rooster", "crows"),
    ("sturdy", "wagon", "rolls"), ("clever", "fox", "hides"),
    ("warm", "hearth", "crackles"), ("deep", "well", "echoes"),
    ("old", "belfry", "tolls"), ("young", "apprentice", "learns"),
    ("keen", "falcon", "circles"), ("mossy", "boulder", "rests"),
    ("ripe", "melon", "ripens"), ("tired", "carter", "naps"),
    ("brave", "warden", "patrols"), ("shy", "heron", "wades"),
    ("plump", "goose", "waddles"), ("stern", "abbot", "prays"),
    ("nimble", "weaver", "spins"), ("tall", "poplar", "bends"),
    ("smoky", "chimney", "puffs"), ("loud", "hammer", "pounds"),
    ("calm", "skipper", "steers"), ("sharp", "sickle", "gleams"),
]

NAME_PRE = [
    "bar", "cor", "dal", "fen", "gor", "hal", "jor", "kel", "lam", "mor",
    "nar", "pel", "quin", "ral", "sor", "tam", "ul", "vor", "wen", "yar",
    "zel", "bren", "cal", "dor", "el",
]
NAME_SUF = [
    "a", "an", "ara", "eth", "ia", "ian", "ic", "il", "in", "ina", "is",
    "on", "or", "os", "ra", "ri", "un", "us", "wyn", "yth", "mar", "nel",
    "ric", "tas", "vin", "wick", "worth", "by",
]
RARE_PRE = [
    "vel", "tor", "gar", "mel", "san", "pol", "ker", "lum", "bryn", "fal",
    "hes", "jun", "kol", "mir", "nol", "ost", "pru", "rew", "syl", "tev",
]
RARE_SUF = [
    "ite", "ium", "ine", "ol", "ane", "ase", "ose", "yl", "oid", "ar",
    "ex", "ion", "ile", "ent", "ure",
]

NUMS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven", "twelve"]
PLURALS = [
    "baskets", "crates", "sacks", "jars", "ropes", "tools", "coins",
    "apples", "pears", "loaves", "candles", "boots", "maps", "bells", "pots",
]
CONTAINERS = ["pantry", "barn", "attic", "shed", "vault", "cupboard", "chest", "loft"]
TRAVEL_VERBS = ["walked", "sailed", "rode", "hiked"]

POS_WORDS = ["wonderful", "delightful", "splendid", "charming", "cheerful", "pleasant", "lovely", "merry"]
NEG_WORDS = ["dreadful", "dismal", "tedious", "gloomy", "bitter", "wretched", "dreary", "sour"]


def cluster_place(i):
    return PLACES[i % len(PLACES)]


def fact_a(i):
    adj, noun, verb = CLUSTERS[i]
    return f"the {adj} {noun} {verb} near the {cluster_place(i)} ."


def fact_b(i):
    adj, noun, verb = CLUSTERS[i]
    return f"every morning the {adj} {noun} {verb} again ."


def corpus_sentences(rng):
    sents = []
    for i in range(len(CLUSTERS)):
        sents += [fact_a(i)] * 5 + [fact_b(i)] * 5

    names = [p + s for p in NAME_PRE for s in NAME_SUF]
    rng.shuffle(names)
    for i in range(350):
        n1, n2 = names[2 * i], names[2 * i + 1]
        place = PLACES[i % len(PLACES)]
        verb = TRAVEL_VERBS[PLACES.index(place) % len(TRAVEL_VERBS)]
        day = DAYS[i % len(DAYS)]
        sents.append(f"{n1} and {n2} {verb} to the {place} on {day} .")

    for _ in range(100):
        p1, p2 = rng.sample(PLURALS, 2)
        n1, n2 = rng.choice(NUMS), rng.choice(NUMS)
        box = CONTAINERS[PLURALS.index(p1) % len(CONTAINERS)]
        sents.append(f"{n1} {p1} and {n2} {p2} sat in the {box} .")

    rares = [p + s for p in RARE_PRE for s in RARE_SUF]
    rng.shuffle(rares)
    for i in range(150):
        r1, r2 = rares[2 * i], rares[2 * i + 1]
        place = PLACES[(i * 7) % len(PLACES)]
        sents.append(f"the trader sold {r1} and {r2} at the {place} market .")

    assert len(sents) == 1000
    rng.shuffle(sents)
    return sents


def write_corpus(rng):
    sents = corpus_sentences(rng)
    docs = [sents[i:i + 8] for i in range(0, len(sents), 8)]
    text = "\n\n".join("\n".join(doc) for doc in docs) + "\n"
    (ASSETS / "toy_corpus.txt").write_text(text)
    words = {w for s in sents for w in s.split()}
    print(f"corpus: {len(sents)} sentences, {len(docs)} documents, {len(words)} word types")


def write_tsv(task_dir, name, header, rows):
    d = ASSETS / "miniglue" / task_dir
    d.mkdir(parents=True, exist_ok=True)
    lines = ([header] if header else []) + ["\t".join(str(c) for c in row) for row in rows]
    (d / name).write_text("\n".join(lines) + "\n")


def scramble(rng, sent):
    words = sent.rstrip(" .").split()
    while True:
        rng.shuffle(words)
        out = " ".join(words) + " ."
        if out != sent:
            return out


def make_cola(rng):
    rows = []
    for i in range(48):
        sent = fact_a(i % len(CLUSTERS))
        if i % 2 == 0:
            rows.append(("tc", 1, "", sent))
        else:
            rows.append(("tc", 0, "*", scramble(rng, sent)))
    write_tsv("CoLA", "train.tsv", None, rows[:32])
    write_tsv("CoLA", "dev.tsv", None, rows[32:])


def make_sst(rng):
    rows = [("sentence", "label")]
    texts = []
    for i in range(48):
        place = PLACES[i % len(PLACES)]
        if i % 2 == 0:
            w = POS_WORDS[(i // 2) % len(POS_WORDS)]
            texts.append((f"a {w} evening at the {place} .", 1))
        else:
            w = NEG_WORDS[(i // 2) % len(NEG_WORDS)]
            texts.append((f"a {w} evening at the {place} .", 0))
    write_tsv("SST-2", "train.tsv", "sentence\tlabel", texts[:32])
    write_tsv("SST-2", "dev.tsv", "sentence\tlabel", texts[32:])


def make_mrpc(rng):
    header = "Quality\t#1 ID\t#2 ID\t#1 String\t#2 String"
    rows = []
    for i in range(48):
        c = i % len(CLUSTERS)
        if i % 2 == 0:
            rows.append((1, 1000 + i, 2000 + i, fact_a(c), fact_b(c)))
        else:
            other = (c + 9) % len(CLUSTERS)
            rows.append((0, 1000 + i, 2000 + i, fact_a(c), fact_a(other)))
    write_tsv("MRPC", "train.tsv", header, rows[:32])
    write_tsv("MRPC", "dev.tsv", header, rows[32:])


def make_sts(rng):
    header = (
        "index\tgenre\tfilename\tyear\told_index\tsource1\tsource2"
        "\tsentence1\tsentence2\tscore"
    )
    rows = []
    for i in range(48):
        c = i % len(CLUSTERS)
        kind = i % 4
        s1 = fact_a(c)
        if kind == 0:
            s2, score = s1, 5.000
        elif kind == 1:
            s2, score = fact_b(c), 3.600
        elif kind == 2:
            s2, score = fact_a((c + 5) % len(CLUSTERS)), 1.400
        else:
            place = PLACES[i % len(PLACES)]
            s2, score = f"the trader sold velite at the {place} market .", 0.400
        rows.append((i, "toy", "toy", 2026, i, "none", "none", s1, s2, f"{score:.3f}"))
    write_tsv("STS-B", "train.tsv", header, rows[:32])
    write_tsv("STS-B", "dev.tsv", header, rows[32:])


def make_qqp(rng):
    header = "id\tqid1\tqid2\tquestion1\tquestion2\tis_duplicate"
    rows = []
    for i in range(48):
        adj, noun, verb = CLUSTERS[i % len(CLUSTERS)]
        q1 = f"where does the {adj} {noun} {verb} ?"
        if i % 2 == 0:
            q2 = f"near which place does the {adj} {noun} {verb} ?"
            label = 1
        else:
            a2, n2, v2 = CLUSTERS[(i + 11) % len(CLUSTERS)]
            q2 = f"where does the {a2} {n2} {v2} ?"
            label = 0
        rows.append((i, 10 + i, 50 + i, q1, q2, label))
    write_tsv("QQP", "train.tsv", header, rows[:32])
    write_tsv("QQP", "dev.tsv", header, rows[32:])


def make_mnli(rng):
    header = (
        "index\tpromptID\tpairID\tgenre\tsentence1_binary_parse"
        "\tsentence2_binary_parse\tsentence1_parse\tsentence2_parse"
        "\tsentence1\tsentence2\tlabel1\tgold_label"
    )
    rows = []
    for i in range(54):
        c = i % len(CLUSTERS)
        adj, noun, verb = CLUSTERS[c]
        premise = fact_a(c)
        kind = i % 3
        if kind == 0:
            hypo, label = f"the {noun} {verb} near the {cluster_place(c)} .", "entailment"
        elif kind == 1:
            day = DAYS[i % len(DAYS)]
            hypo, label = f"the {adj} {noun} belongs to the {day} fair .", "neutral"
        else:
            other = PLACES[(PLACES.index(cluster_place(c)) + 7) % len(PLACES)]
            hypo, label = f"the {adj} {noun} {verb} near the {other} .", "contradiction"
        rows.append((i, i, f"{i}t", "toy", "(())", "(())", "(())", "(())", premise, hypo, label, label))
    write_tsv("MNLI", "train.tsv", header, rows[:36])
    write_tsv("MNLI", "dev_matched.tsv", header, rows[36:])


def make_qnli(rng):
    header = "index\tquestion\tsentence\tlabel"
    rows = []
    for i in range(48):
        c = i % len(CLUSTERS)
        adj, noun, verb = CLUSTERS[c]
        q = f"what {verb} near the {cluster_place(c)} ?"
        if i % 2 == 0:
            rows.append((i, q, fact_a(c), "entailment"))
        else:
            rows.append((i, q, fact_a((c + 13) % len(CLUSTERS)), "not_entailment"))
    write_tsv("QNLI", "train.tsv", header, rows[:32])
    write_tsv("QNLI", "dev.tsv", header, rows[32:])


def make_rte(rng):
    header = "index\tsentence1\tsentence2\tlabel"
    rows = []
    for i in range(48):
        c = i % len(CLUSTERS)
        adj, noun, verb = CLUSTERS[c]
        if i % 2 == 0:
            rows.append((i, fact_a(c), f"the {noun} {verb} .", "entailment"))
        else:
            a2, n2, v2 = CLUSTERS[(c + 17) % len(CLUSTERS)]
            rows.append((i, fact_a(c), f"the {n2} {v2} .", "not_entailment"))
    write_tsv("RTE", "train.tsv", header, rows[:32])
    write_tsv("RTE", "dev.tsv", header, rows[32:])


def main():
    rng = random.Random(20260814)
    ASSETS.mkdir(exist_ok=True)
    write_corpus(rng)
    for make in (make_cola, make_sst, make_mrpc, make_sts, make_qqp, make_mnli, make_rte, make_qnli):
        make(rng)
    print("task files -> assets/miniglue/")


if __name__ == "__main__":
    main()
