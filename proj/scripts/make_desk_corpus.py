#!/usr/bin/env python3
"""Regenerate the bundled desk corpora (data/corpus_{en,fr,de,py}.jsonl).

Deterministic template grammars, one JSON object per line with keys
"text" and "lang". Roughly 10,500 documents per language.
"""

import json
import random
from pathlib import Path

SEED = 20260816
DOCS_PER_LANG = 10500

EN = {
    "subjects": [
        "the engineer", "the librarian", "the harbor master", "a young apprentice", "the cartographer",
        "the night watchman", "an old sailor", "the clockmaker", "the surveyor", "a patient teacher",
        "the archivist", "the ferry pilot", "a careful editor", "the lighthouse keeper", "the botanist",
    ],
    "verbs": [
        "measured", "repaired", "described", "collected", "sketched", "catalogued", "inspected",
        "recorded", "assembled", "compared", "restored", "traced", "weighed", "sorted", "labeled",
    ],
    "objects": [
        "the copper instruments", "a stack of maps", "the tide tables", "three wooden crates",
        "the station ledger", "a broken compass", "the signal lamps", "the morning dispatches",
        "an atlas of rivers", "the brass fittings", "a bundle of letters", "the survey notes",
        "the grain samples", "a row of bottles", "the printing plates",
    ],
    "places": [
        "near the old bridge", "at the northern dock", "inside the reading room", "behind the mill",
        "along the canal", "under the clock tower", "in the lower archive", "beside the greenhouse",
        "at the edge of town", "on the upper deck",
    ],
    "openers": [
        "Early that morning,", "After the rain stopped,", "Before the market opened,", "Later in the week,",
        "During the long winter,", "Once the fog lifted,", "By the end of the season,",
    ],
    "comments": [
        "The work took nearly {n} hours.", "Nothing was out of place.", "Two entries were missing.",
        "The results matched the older records.", "It was quieter than usual.",
        "A short note explained the delay.", "The list grew to {n} items.",
        "Everyone agreed it could wait until spring.",
    ],
}

FR = {
    "subjects": [
        "l'ingénieur", "la bibliothécaire", "le maître du port", "une jeune apprentie", "le cartographe",
        "le veilleur de nuit", "un vieux marin", "l'horloger", "la géomètre", "un professeur patient",
        "l'archiviste", "la pilote du bac", "une éditrice attentive", "le gardien du phare", "la botaniste",
    ],
    "verbs": [
        "a mesuré", "a réparé", "a décrit", "a rassemblé", "a dessiné", "a classé", "a inspecté",
        "a noté", "a assemblé", "a comparé", "a restauré", "a recopié", "a pesé", "a trié", "a étiqueté",
    ],
    "objects": [
        "les instruments de cuivre", "une pile de cartes", "les tables des marées", "trois caisses en bois",
        "le registre de la gare", "une boussole cassée", "les lampes de signal", "les dépêches du matin",
        "un atlas des rivières", "les fixations de laiton", "un paquet de lettres", "les notes du relevé",
        "les échantillons de grain", "une rangée de bouteilles", "les plaques d'imprimerie",
    ],
    "places": [
        "près du vieux pont", "au quai nord", "dans la salle de lecture", "derrière le moulin",
        "le long du canal", "sous la tour de l'horloge", "dans l'archive basse", "à côté de la serre",
        "à la sortie de la ville", "sur le pont supérieur",
    ],
    "openers": [
        "Tôt ce matin-là,", "Après la pluie,", "Avant l'ouverture du marché,", "Plus tard dans la semaine,",
        "Pendant le long hiver,", "Une fois le brouillard levé,", "À la fin de la saison,",
    ],
    "comments": [
        "Le travail a duré presque {n} heures.", "Rien ne manquait.", "Deux entrées avaient disparu.",
        "Les résultats correspondaient aux anciens registres.", "C'était plus calme que d'habitude.",
        "Une courte note expliquait le retard.", "La liste atteignait {n} éléments.",
        "Tout le monde a décidé d'attendre le printemps.",
    ],
}

DE = {
    "subjects": [
        "der Ingenieur", "die Bibliothekarin", "der Hafenmeister", "eine junge Gehilfin", "der Kartograph",
        "der Nachtwächter", "ein alter Seemann", "der Uhrmacher", "die Vermesserin", "ein geduldiger Lehrer",
        "der Archivar", "die Fährpilotin", "eine sorgfältige Redakteurin", "der Leuchtturmwärter", "die Botanikerin",
    ],
    "verbs": [
        "vermaß", "reparierte", "beschrieb", "sammelte", "zeichnete", "ordnete", "prüfte",
        "notierte", "montierte", "verglich", "restaurierte", "übertrug", "wog", "sortierte", "beschriftete",
    ],
    "objects": [
        "die Kupferinstrumente", "einen Stapel Karten", "die Gezeitentafeln", "drei Holzkisten",
        "das Stationsbuch", "einen kaputten Kompass", "die Signallampen", "die Morgenmeldungen",
        "einen Flussatlas", "die Messingbeschläge", "ein Bündel Briefe", "die Vermessungsnotizen",
        "die Getreideproben", "eine Reihe Flaschen", "die Druckplatten",
    ],
    "places": [
        "an der alten Brücke", "am Nordkai", "im Lesesaal", "hinter der Mühle",
        "entlang des Kanals", "unter dem Uhrturm", "im unteren Archiv", "neben dem Gewächshaus",
        "am Stadtrand", "auf dem Oberdeck",
    ],
    "openers": [
        "Früh am Morgen", "Nach dem Regen", "Vor der Marktöffnung", "Später in der Woche",
        "Während des langen Winters", "Als der Nebel sich hob,", "Am Ende der Saison",
    ],
    "comments": [
        "Die Arbeit dauerte fast {n} Stunden.", "Nichts fehlte.", "Zwei Einträge waren verschwunden.",
        "Die Ergebnisse stimmten mit den älteren Büchern überein.", "Es war ruhiger als sonst.",
        "Ein kurzer Vermerk erklärte die Verzögerung.", "Die Liste wuchs auf {n} Stücke.",
        "Alle wollten bis zum Frühjahr warten.",
    ],
}

PY_NAMES = ["items", "rows", "values", "records", "scores", "entries", "samples", "lines", "fields", "buckets"]
PY_FUNCS = ["scale", "merge", "filter", "load", "parse", "index", "collect", "window", "normalize", "tally"]
PY_VARS = ["total", "count", "result", "acc", "best", "cursor", "limit", "offset", "width", "step"]


def en_doc(rng):
    return prose_doc(rng, EN, period=".")


def fr_doc(rng):
    return prose_doc(rng, FR, period=".")


def de_doc(rng):
    return prose_doc(rng, DE, period=".")


def prose_doc(rng, pools, period="."):
    sentences = []
    for _ in range(rng.randint(1, 3)):
        parts = []
        if rng.random() < 0.4:
            parts.append(rng.choice(pools["openers"]))
        subject = rng.choice(pools["subjects"])
        if not parts:
            subject = subject[0].upper() + subject[1:]
        parts.append(subject)
        parts.append(rng.choice(pools["verbs"]))
        parts.append(rng.choice(pools["objects"]))
        if rng.random() < 0.7:
            parts.append(rng.choice(pools["places"]))
        sentences.append(" ".join(parts) + period)
        if rng.random() < 0.35:
            sentences.append(rng.choice(pools["comments"]).format(n=rng.randint(2, 40)))
    return " ".join(sentences)


def py_doc(rng):
    kind = rng.randrange(4)
    f = rng.choice(PY_FUNCS)
    xs = rng.choice(PY_NAMES)
    v = rng.choice(PY_VARS)
    n = rng.randint(2, 9)
    if kind == 0:
        return (
            f"def {f}_{xs}({xs}, factor={n}):\n"
            f"    {v} = 0\n"
            f"    for item in {xs}:\n"
            f"        {v} += item * factor\n"
            f"    return {v}\n"
        )
    if kind == 1:
        cmp_op = rng.choice(["<", ">", "<=", ">="])
        return (
            f"def {f}_{xs}({xs}, limit={n * 10}):\n"
            f"    return [x for x in {xs} if x {cmp_op} limit]\n"
        )
    if kind == 2:
        g = rng.choice(PY_FUNCS)
        return (
            f"class {f.capitalize()}{xs.capitalize()}:\n"
            f"    def __init__(self, {xs}):\n"
            f"        self.{xs} = list({xs})\n"
            f"        self.{v} = {n}\n\n"
            f"    def {g}(self, key=None):\n"
            f"        return sorted(self.{xs}, key=key)[: self.{v}]\n"
        )
    other = rng.choice(PY_NAMES)
    return (
        f"def {f}_{other}({xs}, {other}):\n"
        f"    if not {xs}:\n"
        f"        return {{}}\n"
        f"    {v} = {{k: v for k, v in zip({xs}, {other})}}\n"
        f"    return {v}\n"
    )


def main():
    rng = random.Random(SEED)
    out_dir = Path(__file__).resolve().parent.parent / "data"
    out_dir.mkdir(exist_ok=True)
    makers = {"en": en_doc, "fr": fr_doc, "de": de_doc, "py": py_doc}
    for lang, make in makers.items():
        path = out_dir / f"corpus_{lang}.jsonl"
        with path.open("w", encoding="utf-8") as fh:
            for _ in range(DOCS_PER_LANG):
                doc = {"text": make(rng), "lang": lang}
                fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
        print(f"{path}: {DOCS_PER_LANG} docs")


if __name__ == "__main__":
    main()
