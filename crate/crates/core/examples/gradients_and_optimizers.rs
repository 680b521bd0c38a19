//! The three tasks, their analytic gradients against central differences,
//! and one hand-checkable step of each optimizer.
//!
//! ```bash
//! cargo run --example gradients_and_optimizers
//! ```

use critbatch::optim::{AdamHyper, OptimizerKind, OptimizerState};
use critbatch::rng::RngStream;
use critbatch::tasks::{Task, TaskSpec};

const TASKS: &str = r#"
[[task]]
kind = "quadratic"
dimension = 3
hessian_diag = [1.0, 2.0, 3.0]
optimum = [0.0, 0.0, 0.0]
noise_cov_diag = [1.0, 1.0, 1.0]

[[task]]
kind = "mlp"
layer_widths = [12]
activation = "tanh"
data_seed = 4
input_dim = 6
num_classes = 3

[[task]]
kind = "tiny_lm"
vocab_size = 16
context_len = 6
embed_dim = 8
num_layers = 1
corpus_seed = 2
"#;

#[derive(serde::Deserialize)]
struct Tasks {
    task: Vec<TaskSpec>,
}

fn fd_gap(task: &dyn Task, seed: u64) -> critbatch::Result<f64> {
    let root = RngStream::from_seed(seed);
    let params = task.init_params(&mut root.child(b"init"));
    let batch = task.sample_batch(&mut root.child(b"data"), 4)?;
    let (_, grad) = task.loss_and_grad(&params, &batch)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..params.len()).step_by((params.len() / 25).max(1)) {
        let mut p = params.clone();
        p[i] += h;
        let plus = task.loss_and_grad(&p, &batch)?.0;
        p[i] -= 2.0 * h;
        let minus = task.loss_and_grad(&p, &batch)?.0;
        worst = worst.max(((plus - minus) / (2.0 * h) - grad[i]).abs());
    }
    Ok(worst)
}

fn main() -> anyhow::Result<()> {
    let specs: Tasks = toml::from_str(TASKS)?;
    for (name, spec) in ["quadratic", "mlp", "tiny_lm"].iter().zip(&specs.task) {
        let task = spec.build()?;
        println!(
            "{name:<10} {:>6} params, worst gradient gap {:.2e}",
            task.dimension(),
            fd_gap(task.as_ref(), 1)?
        );
    }

    // SGD: θ ← θ − η g.
    let mut sgd = OptimizerState::new(OptimizerKind::Sgd, 2)?;
    let mut theta = vec![1.0, -1.0];
    sgd.step(&mut theta, &[0.5, -2.0], 0.1)?;
    println!("\nsgd step: {theta:?} (expected [0.95, -0.8])");

    // Adam's first step moves every coordinate by about η·sign(g).
    let mut adam = OptimizerState::new(OptimizerKind::Adam(AdamHyper::default()), 2)?;
    let mut theta = vec![1.0, -1.0];
    adam.step(&mut theta, &[0.5, -2.0], 0.1)?;
    println!("adam step: {theta:?} (expected ≈ [0.9, -0.9])");
    Ok(())
}
