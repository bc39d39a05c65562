//! Binary PPM (P6, 8-bit) frame files.

use std::fs;
use std::path::Path;

use crate::error::{Result, StivError};
use crate::model::PixelVideo;

use super::Clip;

pub fn encode(frame: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(frame);
    out
}

/// Parses a P6 file with maxval 255, allowing comments in the header.
pub fn decode(bytes: &[u8]) -> Result<PixelVideo> {
    let bad = |m: &str| StivError::Invalid(format!("malformed PPM: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary P6 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit maxval 255 is supported"));
    }
    let data = &bytes[i + 1..];
    if data.len() != width * height * 3 {
        return Err(bad("payload size does not match header"));
    }
    PixelVideo::new(1, height, width, data.to_vec())
}

pub fn read(path: &Path) -> Result<PixelVideo> {
    let bytes = fs::read(path).map_err(|e| StivError::Invalid(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Writes `frame_0000.ppm`, `frame_0001.ppm`, ... into `dir`.
pub fn write_frames(dir: &Path, video: &PixelVideo) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| StivError::Invalid(format!("{}: {e}", dir.display())))?;
    for f in 0..video.frames {
        let path = dir.join(format!("frame_{f:04}.ppm"));
        fs::write(&path, encode(video.frame(f), video.width, video.height))
            .map_err(|e| StivError::Invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

/// Exports clips as `clip_0000/frame_*.ppm` plus a `clip_0000/caption.txt` line.
pub fn export_corpus(dir: &Path, clips: &[Clip]) -> Result<()> {
    for (i, clip) in clips.iter().enumerate() {
        let sub = dir.join(format!("clip_{i:04}"));
        write_frames(&sub, &clip.video)?;
        let caption = format!("{}\n", clip.spec.caption());
        fs::write(sub.join("caption.txt"), caption).map_err(|e| StivError::Invalid(e.to_string()))?;
    }
    Ok(())
}
