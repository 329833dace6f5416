"""Writes miracl_fixture.jsonl: 50 MIRACL-shaped rows of synthetic Japanese text."""
import json
import random

rng = random.Random(20240917)
topics = [
    ["東京", "電車", "駅", "路線"], ["富士山", "登山", "山頂", "標高"], ["寿司", "魚", "職人", "江戸"],
    ["将棋", "棋士", "対局", "名人"], ["桜", "春", "花見", "公園"], ["地震", "津波", "防災", "観測"],
    ["野球", "球場", "投手", "優勝"], ["漫画", "雑誌", "作家", "連載"], ["温泉", "旅館", "源泉", "湯治"],
    ["新幹線", "速度", "開業", "車両"],
]
fillers = ["は", "が", "の", "を", "に", "で", "と", "も", "から", "まで"]
tails = ["です", "である", "とされる", "と言われている", "が知られている", "を持つ"]
enders = ["。", "。", "。", "！", "？", ". "]


def sentence(topic):
    words = [rng.choice(topic) if rng.random() < 0.6 else rng.choice(sum(topics, [])) for _ in range(rng.randint(2, 5))]
    body = "".join(w + rng.choice(fillers) for w in words[:-1]) + words[-1] + rng.choice(tails)
    return body + rng.choice(enders)


rows = []
for i in range(50):
    topic = topics[i % len(topics)]
    positives = []
    for _ in range(rng.randint(1, 3)):
        n = rng.choice([1, 1, 2, 3, 4])
        sep = rng.choice(["", " ", "　"])
        positives.append({"docid": f"{i}#{len(positives)}", "title": topic[0], "text": sep.join(sentence(topic) for _ in range(n)).strip()})
    negatives = [{"docid": f"n{i}", "title": "", "text": sentence(rng.choice(topics))}]
    rows.append({"query_id": str(i), "query": topic[0] + "について", "positive_passages": positives, "negative_passages": negatives})

with open("miracl_fixture.jsonl", "w", encoding="utf-8") as f:
    for r in rows:
        f.write(json.dumps(r, ensure_ascii=False) + "\n")
