use super::{DanceStream, DataError, SequenceWindow};

/// Number of windows of length `window` at `stride` in a stream of `len` frames.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if window == 0 || stride == 0 || window > len {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Sliding windows over one stream. Windows never cross stream boundaries.
pub fn extract_windows(stream: &DanceStream, window: usize, stride: usize) -> Result<Vec<SequenceWindow>, DataError> {
    if window == 0 || stride == 0 {
        return Err(DataError::ZeroWindow);
    }
    if window > stream.len() {
        return Err(DataError::WindowTooLong {
            window,
            len: stream.len(),
        });
    }
    Ok((0..window_count(stream.len(), window, stride))
        .map(|i| {
            let start = i * stride;
            SequenceWindow {
                stream_id: stream.id.clone(),
                start,
                data: stream
                    .window_view(start, window)
                    .expect("start within bounds")
                    .to_owned(),
            }
        })
        .collect())
}
