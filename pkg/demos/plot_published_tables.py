"""
Aggregating per-model scores into a report
==========================================

The evaluation module keeps every score as an exact fraction of counts and only
rounds for display. Here we feed it the published per-model LOSO scores and the
assembly-task recalls, and check that the averages and implied accuracies agree
with what was reported.
"""

from gazeattn.eval import accuracy_from_recalls, aggregate_scores, round_half_up

# %%
# LOSO on the eight-person dataset: (accuracy, F1) per held-out person.
loso = [(0.97, 0.97), (0.91, 0.91), (0.99, 0.99), (0.98, 0.98),
        (0.96, 0.95), (0.93, 0.93), (0.83, 0.82), (0.97, 0.97)]
acc, f1 = aggregate_scores([a for a, _ in loso], [f for _, f in loso])
print(f"LOSO average accuracy {acc:.5f} -> {round_half_up(acc, 3)}")
print(f"LOSO average F1       {f1:.5f} -> {round_half_up(f1, 2)}")

# %%
# Rounding is half-up on the decimal representation, so 0.9425 becomes 0.943.
# Binary floating point would have given 0.942 here.
print(round(0.9425, 3), round_half_up(0.9425, 3))

# %%
# The assembly test set has 833 Cobot, 940 Table and 962 Distracted crops.
# Recall times class size gives the number of correct predictions per class,
# from which the overall accuracy follows.
counts = (833, 940, 962)
assembly = {
    "Model1": ((0.85, 0.98, 0.61), 0.81), "Model2": ((0.87, 0.95, 0.66), 0.82),
    "Model3": ((0.87, 0.95, 0.65), 0.82), "Model4": ((0.83, 0.95, 0.67), 0.81),
    "Model5": ((0.89, 0.98, 0.61), 0.82), "Model6": ((0.86, 0.96, 0.62), 0.81),
    "Model7": ((0.87, 0.96, 0.63), 0.82), "Model8": ((0.83, 0.94, 0.67), 0.82),
}
for name, (recalls, reported) in assembly.items():
    implied = accuracy_from_recalls(recalls, counts)
    print(f"{name}: implied {implied:.4f}  reported {reported:.2f}  gap {abs(implied - reported):.4f}")
