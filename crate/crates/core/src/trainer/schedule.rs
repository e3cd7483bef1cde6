/// Learning rate for the update at `step`: linear warmup from 0 to `peak`
/// over `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: usize, peak: f32, warmup: usize, total: usize) -> f32 {
    let step = step.min(total);
    if step < warmup {
        return peak * step as f32 / warmup as f32;
    }
    if total <= warmup {
        return peak;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    (peak as f64 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())) as f32
}
