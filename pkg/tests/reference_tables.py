"""Published result tables, used only as rendering fixtures."""
from auditmatch.metrics import AggregateReport

# label, sensitivity, MAP, F1 (percent, top 5)
SYSTEMS = [
    ("Chroma (Ada V1)", 14.00, 7.12, 9.12),
    ("Chroma (Ada V2)", 25.73, 17.33, 13.15),
    ("Chroma (Ada V2) + GPT-3.5 Turbo", 29.95, 21.32, 15.74),
    ("Chroma (Ada V2) + GPT-4", 35.30, 24.72, 18.53),
    ("SentenceBERT", 52.12, 39.00, 27.69),
    ("ZeroShotALI", 57.62, 44.65, 30.57),
]

PROMPTS = [
    ("A", 36.92, 26.38, 23.75),
    ("B", 35.54, 26.00, 23.75),
    ("C", 23.57, 22.62, 17.05),
    ("D", 23.57, 22.62, 17.05),
]


def as_report(label, sens, map_, f1, k=5):
    return AggregateReport(label, k, 100, sens / 100, map_ / 100, f1 / 100, None, None)


def system_reports(k=5):
    return [as_report(*row, k=k) for row in SYSTEMS]


def prompt_reports():
    return [as_report(*row) for row in PROMPTS]
