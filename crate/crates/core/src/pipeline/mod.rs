//! The latent-denoising relighting pipeline: input assembly, codec,
//! denoiser with light-adapter injection sites, training and sampling.

mod codec;
mod model;
mod sample;
mod schedule;
mod train;

pub use codec::{decode_latent, encode_latent, LatentGrid, LATENT_CHANNELS, PATCH};
pub use model::{Conditioning, ModelConfig, RelightModel};
pub use sample::{sample, sample_with, NoisePredictor, SampleSettings};
pub use schedule::NoiseSchedule;
pub use train::{diffusion_loss, loss_and_gradients, train_step, DiffusionDraw, TrainExample, Trainer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, Mask};

/// Closed toy vocabulary. Ids are positions in this list.
pub const VOCAB: &[&str] = &[
    "<blend>",
    "<null>",
    "left",
    "right",
    "top",
    "down",
    "top_left",
    "top_right",
    "down_left",
    "down_right",
    "white",
    "warm",
    "cool",
    "red",
    "green",
    "purple",
    "gradient_sky",
    "flat",
    "two_tone",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token(pub u16);

impl Token {
    /// The fixed "blend these two images" prompt of image-based relighting.
    pub const BLEND: Token = Token(0);
    /// Condition-free prompt used for dropout and guidance.
    pub const NULL: Token = Token(1);

    pub fn from_word(word: &str) -> Result<Token> {
        VOCAB
            .iter()
            .position(|&w| w == word)
            .map(|i| Token(i as u16))
            .ok_or_else(|| Error::param(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn word(self) -> &'static str {
        VOCAB.get(self.0 as usize).copied().unwrap_or("<unk>")
    }
}

pub fn tokens_from_words<S: AsRef<str>>(words: &[S]) -> Result<Vec<Token>> {
    words.iter().map(|w| Token::from_word(w.as_ref())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    ImageBased,
    TextBased,
    Both,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "image" | "image_based" => Ok(Mode::ImageBased),
            "text" | "text_based" => Ok(Mode::TextBased),
            "both" => Ok(Mode::Both),
            _ => Err(Error::param(format!("unknown mode {s:?}"))),
        }
    }

    pub fn uses_background(self) -> bool {
        !matches!(self, Mode::TextBased)
    }
}

/// One relighting request.
#[derive(Clone, Debug, PartialEq)]
pub struct RelightInput {
    pub fg: ImageBuffer,
    pub fg_mask: Mask,
    pub bg: ImageBuffer,
    pub prompt_tokens: Vec<Token>,
    pub mode: Mode,
}

impl RelightInput {
    /// Background given as an image; the prompt is the fixed blend token.
    pub fn image_based(fg: ImageBuffer, fg_mask: Mask, bg: ImageBuffer) -> Result<Self> {
        Self::checked(fg, fg_mask, bg, vec![Token::BLEND], Mode::ImageBased)
    }

    /// Scene described by tokens; the background is all black.
    pub fn text_based(fg: ImageBuffer, fg_mask: Mask, prompt_tokens: Vec<Token>) -> Result<Self> {
        let bg = ImageBuffer::black(fg.height(), fg.width());
        Self::checked(fg, fg_mask, bg, prompt_tokens, Mode::TextBased)
    }

    pub fn both(fg: ImageBuffer, fg_mask: Mask, bg: ImageBuffer, prompt_tokens: Vec<Token>) -> Result<Self> {
        Self::checked(fg, fg_mask, bg, prompt_tokens, Mode::Both)
    }

    fn checked(fg: ImageBuffer, fg_mask: Mask, bg: ImageBuffer, prompt_tokens: Vec<Token>, mode: Mode) -> Result<Self> {
        let inp = RelightInput {
            fg,
            fg_mask,
            bg,
            prompt_tokens,
            mode,
        };
        inp.validate()?;
        Ok(inp)
    }

    pub fn validate(&self) -> Result<()> {
        self.fg.same_dims(&self.bg)?;
        self.fg_mask.check_dims(self.fg.height(), self.fg.width())?;
        if self.prompt_tokens.is_empty() {
            return Err(Error::param("prompt must hold at least one token"));
        }
        match self.mode {
            Mode::ImageBased if self.prompt_tokens != [Token::BLEND] => {
                Err(Error::param("image-based relighting uses the blend prompt"))
            }
            Mode::TextBased if self.bg.data().iter().any(|&v| v != 0.0) => {
                Err(Error::param("text-based relighting uses an all-black background"))
            }
            _ => Ok(()),
        }
    }
}

/// `[noise | encode(fg ⊙ mask) | encode(bg)]` along channels.
pub fn assemble_input(inp: &RelightInput, noise: &LatentGrid) -> Result<LatentGrid> {
    inp.validate()?;
    let fg = encode_latent(&inp.fg.masked(&inp.fg_mask)?)?;
    let bg = encode_latent(&inp.bg)?;
    if noise.h() != fg.h() || noise.w() != fg.w() {
        return Err(Error::dim(format!(
            "noise {}x{} vs latent {}x{}",
            noise.h(),
            noise.w(),
            fg.h(),
            fg.w()
        )));
    }
    LatentGrid::concat(&[noise, &fg, &bg])
}
