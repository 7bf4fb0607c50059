#!/usr/bin/env python3
"""Regenerates the bundled fixture corpus under fixtures/.

Produces three files:
  corpus.jsonl      - 40 schema-valid tutoring conversations (the gold stream)
  corpus_sft.jsonl  - a degraded second stream: same ids/questions/students,
                      tutor signatures randomly flipped per field (p=0.3);
                      flips into a direct action also swap in a
                      direct-solution utterance
  solutions.json    - subproblem -> answer bank covering every subproblem

The corpus is deterministic (fixed seed). Student behaviour is drawn from a
small scenario pool per subproblem; tutor codes follow fixed rules so the
fields are learnable from (last student utterance, previous action) context.
"""

import json
import random
from pathlib import Path

SEED = 20250811
OUT = Path(__file__).resolve().parent.parent / "fixtures"

TOPICS = [
    "diffusion", "osmosis", "photosynthesis", "respiration", "mitosis",
    "enzymes", "membranes", "chlorophyll", "glycolysis", "homeostasis",
    "transpiration", "fermentation",
]

ANSWERS = [
    "a concentration gradient", "water movement", "glucose and oxygen",
    "ATP energy", "two identical cells", "an active site",
    "a lipid bilayer", "light absorption", "pyruvate molecules",
    "a stable internal state", "water vapor loss", "lactic acid",
]

PROCESSES = [
    "diffusion", "osmosis", "photosynthesis", "cellular respiration",
    "cell division", "enzyme catalysis", "membrane transport",
    "energy storage",
]

SETTINGS = [
    "plant cells", "animal cells", "bacteria", "leaf tissue",
    "muscle tissue", "root systems", "the bloodstream", "yeast cultures",
]


def hint(topic):
    return f"Think about {topic} and where it fits in this step."


def direct_corpus(answer):
    return f"Since we are stuck, here is the solution: {answer}. We will continue from there."


# Per-subproblem student scenarios: (event sequence, weight).
SCENARIOS = [
    (("correct",), 30),
    (("wrong", "correct"), 22),
    (("wrong", "wrong2"), 10),
    (("partial", "correct"), 14),
    (("partial", "partial2"), 6),
    (("confused", "correct"), 8),
    (("inquiry", "correct"), 5),
    (("offtopic", "correct"), 5),
]


def student_line(event, rng, topic, answer):
    distractor = rng.choice([a for a in ANSWERS if a != answer])
    return {
        "correct": f"I think it is {answer}.",
        "wrong": f"Is it {distractor}?",
        "wrong2": f"Hmm, maybe it is {distractor}?",
        "partial": f"I think part of it is {answer.split()[-1]}.",
        "partial2": f"Still only getting {answer.split()[-1]}, I am afraid.",
        "confused": "I am not sure how to proceed.",
        "inquiry": f"Can you explain what {topic} means?",
        "offtopic": "By the way, did you watch the game last night?",
    }[event]


def tutor_turn(event, topic, answer, sub_title, final, next_intro):
    h = hint(topic)
    resolved_state = "z" if final else "y"
    if event == "correct":
        utt = (
            "Excellent work. We have solved the whole problem."
            if final
            else f"Great job. Let's move on. {next_intro}"
        )
        return "b", 3, resolved_state, utt
    if event == "wrong":
        return "a", 1, "x", f"Not quite. {h}"
    if event == "wrong2":
        utt = direct_corpus(answer)
        if not final:
            utt += f" {next_intro}"
        return "a", 2, resolved_state, utt
    if event == "partial":
        return "c", 4, "x", f"You are partly right. {h}"
    if event == "partial2":
        utt = direct_corpus(answer)
        if not final:
            utt += f" {next_intro}"
        return "c", 5, resolved_state, utt
    if event == "confused":
        return "d", 8, "x", f"Take it step by step. {h}"
    if event == "inquiry":
        return "f", 7, "x", f"Good question. In short, {topic} relates to {answer}. {h}"
    if event == "offtopic":
        return "e", 6, "x", f"Let us stay focused on the problem. {h}"
    raise ValueError(event)


def make_question(qi):
    process = PROCESSES[qi % len(PROCESSES)]
    setting = SETTINGS[qi % len(SETTINGS)]
    question = f"How does {process} work in {setting}?"
    subs = []
    for si in range(3):
        topic = TOPICS[(qi * 3 + si) % len(TOPICS)]
        answer = ANSWERS[(qi * 5 + si * 7) % len(ANSWERS)]
        title = f"Identify the role of {topic} in {setting}"
        subs.append({"title": title, "topic": topic, "answer": answer})
    return question, subs


def pick_scenario(rng):
    total = sum(w for _, w in SCENARIOS)
    roll = rng.randrange(total)
    for events, w in SCENARIOS:
        if roll < w:
            return events
        roll -= w
    raise AssertionError


def make_conversation(conv_id, question, subs, rng):
    turns = []
    intro = (
        "Let us break the problem into parts and tackle them one by one. "
        f"First: {subs[0]['title']}. {hint(subs[0]['topic'])}"
    )
    turns.append(
        {
            "student": f"Q. {question}",
            "tutor": annotation("g", 12, "w", subs[0]["title"], intro),
        }
    )
    for si, sub in enumerate(subs):
        final = si == len(subs) - 1
        next_intro = (
            ""
            if final
            else f"Now: {subs[si + 1]['title']}. {hint(subs[si + 1]['topic'])}"
        )
        for event in pick_scenario(rng):
            student = student_line(event, rng, sub["topic"], sub["answer"])
            ev, action, state, utt = tutor_turn(
                event, sub["topic"], sub["answer"], sub["title"], final, next_intro
            )
            turns.append(
                {"student": student, "tutor": annotation(ev, action, state, sub["title"], utt)}
            )
    return {"id": conv_id, "question": question, "turns": turns}


def annotation(ev, action, state, subproblem, utterance):
    return {
        "Evaluation of Student Response": ev,
        "Action Based on Evaluation": str(action),
        "Subproblem State": state,
        "Subproblem": subproblem,
        "Tutorbot": utterance,
    }


def degrade(conv, bank, rng, flip=0.3):
    out = json.loads(json.dumps(conv))
    evals = list("abcdefg")
    states = list("wxyz")
    for turn in out["turns"]:
        t = turn["tutor"]
        if rng.random() < flip:
            t["Evaluation of Student Response"] = rng.choice(
                [e for e in evals if e != t["Evaluation of Student Response"]]
            )
        if rng.random() < flip:
            old = int(t["Action Based on Evaluation"])
            new = rng.choice([a for a in range(1, 13) if a != old])
            t["Action Based on Evaluation"] = str(new)
            if new in (2, 5):
                answer = bank[t["Subproblem"]]
                t["Tutorbot"] = f"The answer to this part is: {answer}. Let's move on."
        if rng.random() < flip:
            t["Subproblem State"] = rng.choice(
                [s for s in states if s != t["Subproblem State"]]
            )
    return out


def main():
    rng = random.Random(SEED)
    OUT.mkdir(exist_ok=True)
    conversations = []
    bank = {}
    conv_no = 0
    for qi in range(8):
        question, subs = make_question(qi)
        for sub in subs:
            bank[sub["title"]] = sub["answer"]
        for _ in range(5):
            conv_no += 1
            conversations.append(
                make_conversation(f"conv{conv_no:03}", question, subs, rng)
            )

    with open(OUT / "corpus.jsonl", "w") as f:
        for conv in conversations:
            f.write(json.dumps(conv) + "\n")

    degrade_rng = random.Random(SEED + 1)
    with open(OUT / "corpus_sft.jsonl", "w") as f:
        for conv in conversations:
            f.write(json.dumps(degrade(conv, bank, degrade_rng)) + "\n")

    with open(OUT / "solutions.json", "w") as f:
        json.dump(bank, f, indent=2, sort_keys=True)
        f.write("\n")

    n_turns = sum(len(c["turns"]) for c in conversations)
    print(f"wrote {len(conversations)} conversations, {n_turns} turns, {len(bank)} solutions")


if __name__ == "__main__":
    main()
