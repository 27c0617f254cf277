/// Cosine annealing from `lr_max` at epoch 0 down to `lr_min` at
/// `max_epochs`.
pub fn cosine_lr(epoch: usize, lr_min: f64, lr_max: f64, max_epochs: usize) -> f64 {
    let frac = if max_epochs == 0 {
        1.0
    } else {
        epoch.min(max_epochs) as f64 / max_epochs as f64
    };
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}
