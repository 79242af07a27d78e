//! Fixed-length prompt token sequences over a small synthetic vocabulary.
//!
//! Grammar: `<env> (<color> <shape>)* [<style>] <pad>*`, at most eight
//! tokens. Every prompt is a full description of one scene.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROMPT_LEN: usize = 8;
pub const VOCAB_SIZE: usize = 64;

pub const PAD: u16 = 0;
pub const ENV_BASE: u16 = 1;
pub const COLOR_BASE: u16 = 9;
pub const SHAPE_BASE: u16 = 17;
pub const STYLE_BASE: u16 = 20;
/// One past the last assigned token id.
pub const VOCAB_USED: u16 = 22;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<u16>", into = "Vec<u16>")]
pub struct PromptTokens(Vec<u16>);

impl PromptTokens {
    /// Pads `ids` to [`PROMPT_LEN`]. Ids must be below [`VOCAB_SIZE`] and
    /// `PAD` may only appear as a suffix.
    pub fn new(ids: &[u16]) -> Result<Self> {
        if ids.len() > PROMPT_LEN {
            return Err(Error::Domain(format!(
                "prompt of {} tokens exceeds {PROMPT_LEN}",
                ids.len()
            )));
        }
        let mut v = ids.to_vec();
        v.resize(PROMPT_LEN, PAD);
        Self::try_from(v)
    }

    pub fn ids(&self) -> &[u16] {
        &self.0
    }

    /// Tokens before the padding.
    pub fn content(&self) -> &[u16] {
        let end = self.0.iter().position(|&t| t == PAD).unwrap_or(self.0.len());
        &self.0[..end]
    }
}

impl TryFrom<Vec<u16>> for PromptTokens {
    type Error = Error;

    fn try_from(v: Vec<u16>) -> Result<Self> {
        if v.len() != PROMPT_LEN {
            return Err(Error::Domain(format!("prompt length {} != {PROMPT_LEN}", v.len())));
        }
        if let Some(bad) = v.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::Domain(format!("token id {bad} outside vocabulary")));
        }
        let first_pad = v.iter().position(|&t| t == PAD).unwrap_or(v.len());
        if v[first_pad..].iter().any(|&t| t != PAD) {
            return Err(Error::Domain("padding must be a suffix".into()));
        }
        Ok(Self(v))
    }
}

impl From<PromptTokens> for Vec<u16> {
    fn from(p: PromptTokens) -> Self {
        p.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_to_fixed_length() {
        let p = PromptTokens::new(&[1, 9, 17]).unwrap();
        assert_eq!(p.ids(), &[1, 9, 17, 0, 0, 0, 0, 0]);
        assert_eq!(p.content(), &[1, 9, 17]);
    }

    #[test]
    fn rejects_interior_pad_and_range() {
        assert!(PromptTokens::try_from(vec![1, 0, 9, 0, 0, 0, 0, 0]).is_err());
        assert!(PromptTokens::new(&[64]).is_err());
        assert!(PromptTokens::new(&[1; 9]).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let p = PromptTokens::new(&[2, 10, 18]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(serde_json::from_str::<PromptTokens>(&s).unwrap(), p);
        assert!(serde_json::from_str::<PromptTokens>("[1,0,3,0,0,0,0,0]").is_err());
    }
}
