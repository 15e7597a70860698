"""Small synthetic SQuAD 2.0 corpora with planted answers.

Each paragraph states a few facts about a few people; questions ask about
one of them. Unanswerable questions ask for a (person, relation) pair that
the paragraph never states.
"""

from __future__ import annotations

import random

PEOPLE = ["Alice", "Borin", "Chen Wei", "Dana", "Elif", "Farid", "Greta", "Hugo", "Ines", "Jonas",
          "Kofi", "Lena", "Mateo", "Nadia", "Oskar", "Priya"]

RELATIONS = {
    "born": ("{p} was born in {x}.", "Where was {p} born?",
             ["Paris", "Lagos", "Kyoto", "Lima", "Oslo", "Cairo", "Quebec City", "Buenos Aires"]),
    "work": ("{p} works at {x}.", "Where does {p} work?",
             ["Acme Labs", "the city library", "Northwind", "a small bakery", "Globex", "the harbor office"]),
    "year": ("In {x}, {p} moved to the coast.", "When did {p} move to the coast?",
             ["1994", "2003", "1871", "1768", "2011", "1956"]),
    "own": ("{p} owns a {x}.", "What does {p} own?",
            ["red bicycle", "grey parrot", "wooden boat", "violin", "telescope", "tea shop"]),
    "lead": ("{p} once led the {x}.", "What did {p} once lead?",
             ["Mongol Empire", "chess club", "river expedition", "choir", "Yuan dynasty council", "rescue team"]),
}


def make_corpus(n: int = 32, unanswerable_fraction: float = 0.25, seed: int = 0,
                facts_per_paragraph: int = 3, questions_per_paragraph: int = 2) -> dict:
    """SQuAD v2.0 JSON object with exactly ``n`` questions."""
    rng = random.Random(seed)
    n_null = round(n * unanswerable_fraction)
    kinds = [True] * n_null + [False] * (n - n_null)
    rng.shuffle(kinds)

    paragraphs = []
    q_total = 0
    while q_total < n:
        people = rng.sample(PEOPLE, 2)
        facts = []
        used = set()
        while len(facts) < facts_per_paragraph:
            p = rng.choice(people)
            rel = rng.choice(sorted(RELATIONS))
            if (p, rel) in used:
                continue
            used.add((p, rel))
            facts.append((p, rel, rng.choice(RELATIONS[rel][2])))

        context = ""
        spans = {}
        for p, rel, x in facts:
            sentence = RELATIONS[rel][0].format(p=p, x=x)
            spans[(p, rel)] = (x, len(context) + sentence.index(x))
            context += sentence + " "
        context = context.rstrip()

        qas = []
        for _ in range(questions_per_paragraph):
            if q_total >= n:
                break
            impossible = kinds[q_total]
            if impossible:
                free = [(p, r) for p in people for r in sorted(RELATIONS) if (p, r) not in used]
                p, rel = rng.choice(free)
                answers = []
            else:
                p, rel = rng.choice(sorted(spans))
                x, start = spans[(p, rel)]
                answers = [{"text": x, "answer_start": start}]
            qas.append({
                "id": f"syn{seed}-{q_total:04d}",
                "question": RELATIONS[rel][1].format(p=p),
                "answers": answers,
                "is_impossible": impossible,
            })
            q_total += 1
        paragraphs.append({"context": context, "qas": qas})

    return {"version": "v2.0", "data": [{"title": f"Synthetic{seed}", "paragraphs": paragraphs}]}
