//! Frame placement shared by the pitch tracker and the spectral extractor, so
//! both produce the same number of frames for the same clip and frame shift.

/// `floor(duration / frame_shift) + 1`.
pub fn frame_count(num_samples: usize, sample_rate: u32, frame_shift: f64) -> usize {
    let duration = num_samples as f64 / sample_rate as f64;
    // guard against 0.999999 when duration is an exact multiple of the shift
    (duration / frame_shift + 1e-9).floor() as usize + 1
}

/// Start sample of the analysis window of frame `index`. The window is
/// centred on `index * frame_shift` and clamped to lie inside the clip.
pub fn window_start(
    index: usize,
    num_samples: usize,
    sample_rate: u32,
    frame_shift: f64,
    window_len: usize,
) -> usize {
    debug_assert!(window_len <= num_samples);
    let centre = (index as f64 * frame_shift * sample_rate as f64).round() as i64;
    let start = centre - (window_len / 2) as i64;
    start.clamp(0, (num_samples - window_len) as i64) as usize
}
