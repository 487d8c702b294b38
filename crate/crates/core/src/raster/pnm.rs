//! Binary Netpbm (P5 gray, P6 RGB) with 8-bit samples.

use crate::error::{Error, Result};

pub(crate) struct PnmImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u32,
    /// Interleaved samples.
    pub samples: Vec<u8>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("PNM header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("PNM header: bad {what}")))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<PnmImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("unsupported format (expected P5, P6 or VCAT)".into())),
    };
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")? as usize;
    let height = rd.number("height")? as usize;
    let maxval = rd.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format("PNM image has zero extent".into()));
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("PNM maxval {maxval} unsupported (1..=255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(rd.pos) {
        Some(b) if b.is_ascii_whitespace() => rd.pos += 1,
        _ => return Err(Error::Format("PNM header not terminated".into())),
    }
    let need = width * height * channels;
    let body = &bytes[rd.pos..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "PNM body truncated: need {need} bytes, got {}",
            body.len()
        )));
    }
    let samples = body[..need].to_vec();
    if samples.iter().any(|&s| s as u32 > maxval) {
        return Err(Error::Format("PNM sample exceeds maxval".into()));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        maxval,
        samples,
    })
}

pub(crate) fn encode(width: usize, height: usize, channels: usize, interleaved: &[u8]) -> Vec<u8> {
    let magic = if channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(interleaved);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_comments_are_skipped() {
        let mut file = b"P5\n# made by hand\n1 1\n# depth\n255\n".to_vec();
        file.push(7);
        let img = decode(&file).unwrap();
        assert_eq!(img.samples, vec![7]);
    }

    #[test]
    fn missing_dimension() {
        assert!(decode(b"P5\n4\n").is_err());
    }
}
