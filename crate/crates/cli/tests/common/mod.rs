use std::path::Path;

/// A full pipeline at toy sizes; finishes in well under a minute.
pub fn smoke_toml(out: &Path) -> String {
    format!(
        r#"
[experiment]
seed = 7
out_dir = "{}"
repetitions = 2

[corpus]
n_per_class = 6
test_cases = 3

[victim]
epochs = 150
target_accuracy = 0.5

[gan.ring]
batch_size = 16
critic_steps = 2
total_iters = 30

[gan.ring.regularizer_config]
eigen_dim = 2

[gan.speech]
batch_size = 8
critic_steps = 1
total_iters = 4

[gan.speech.regularizer_config]
eigen_dim = 4

[gan.speech.architecture]
kind = "conv"
generator = {{ latent_dim = 64, height = 4, width = 26, channels = 2, res_blocks = 1, kernel = 3, reduction = [2, 1] }}
critic = {{ height = 4, width = 26, channels = 2, res_blocks = 1, kernel = 3, tail_convs = 1 }}

[attack.config]
max_iters = 40
refine_iters = 5

[defense]
n_restarts = 1
steps_per_restart = 5
"#,
        out.display()
    )
}
