"""
Training a tiny stack-augmented language model
==============================================

A few epochs on short marked-reversal strings.  The validation number is the
cross-entropy difference: model nats per symbol minus the best possible.
"""

from nsrnn import harness

cfg = harness.resolve_config({
    "task": "marked-reversal",
    "model": {"hidden_size": 10, "stack": {"type": "rns", "states": 2, "symbols": 2}},
    "train": {"epochs": 5, "lr": 0.01},
    "data": {"train_lengths": [5, 9], "valid_lengths": [5, 9], "train_count": 200,
             "valid_count": 50},
})
data = harness.build_data(cfg, seed=0, test=False)
res, model = harness.train_run(cfg, data, seed=0)
for row in res.log:
    print(f"epoch {row['epoch']}  train {row['train_loss']:.3f}  val ce-diff {row['val_ce_diff']:.3f}")

# score a few strings with the trained model
scorer = harness.model_scorer(model, data.alphabet)
for w in ("01#10", "01#01"):
    print(w, "nats", scorer([list(w)])[0])
