"""End-to-end mini run: collect a little data, train for a few epochs, drive.

This is the whole pipeline at toy scale (a couple of minutes on one core).
The real experiment grids go through the `cicsteer` command line instead:

    cicsteer gen-data --episodes 100 --out dataset
    cicsteer train data_root=dataset out_dir=runs/cil loss=mse
    cicsteer bench --checkpoint runs/cil/best.ckpt data_root=dataset
"""
import tempfile

from cicsteer import bench, simtown, trainer
from cicsteer.cli import generate_dataset

data_dir = tempfile.mkdtemp(prefix="cicsteer_demo_")
summary = generate_dataset("A", episodes=4, duration=40.0,
                           condition_names=("noonClear", "sunsetClear"),
                           seed=0, out=data_dir)
print("collected:", summary)

cfg = trainer.ExperimentConfig(data_root=data_dir,
                               out_dir=data_dir + "/run",
                               loss="mse", head="none", epochs=4, seed=0)
model, report = trainer.train(cfg)
for row in report.epochs:
    print(f"epoch {row['epoch']}: train {row['train_loss']:.4f}  "
          f"val {row['val_loss']:.4f}  val MAE {row['val_mae']:.4f}")

# close the loop on a handful of benchmark tasks
town = simtown.build_town("A", seed=0)
tasks = bench.benchmark_tasks(town)[:6]
wins = 0
for task in tasks:
    res = bench.run_task(model.predict, task, "noonClear", seed=0)
    wins += res.success
    print(f"  {task.task_id:10s} {task.command:9s} -> {res.termination}")
print(f"{wins}/{len(tasks)} tasks at this toy scale "
      f"(the acceptance-scale runs use more data and epochs)")
