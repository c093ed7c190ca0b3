//! Data handling: labels, vocabulary and tokenization, image decoding,
//! the binary record format, and the synthetic dataset generator.

mod labels;
mod ppm;
mod records;
mod synth;
mod vocab;

pub use labels::{parse_label_file, parse_label_file_with_map, LabelMap, LabelRow, DEFAULT_LABEL_MAP};
pub use ppm::load_image;
pub use records::{read_records, write_records, RecordReader};
pub use synth::{generate_synthetic_dataset, write_synthetic_corpus, SynthConfig};
pub use vocab::{build_vocab, detokenize, tokenize, tokenize_with_stats, TokenizeStats, Vocabulary};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::EncodedText;

/// The five classification categories, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Sentiment,
    Humor,
    Sarcasm,
    Offense,
    Motivation,
}

pub const CATEGORIES: [Category; 5] = [
    Category::Sentiment,
    Category::Humor,
    Category::Sarcasm,
    Category::Offense,
    Category::Motivation,
];

impl Category {
    pub fn class_count(self) -> usize {
        match self {
            Category::Sentiment => 3,
            Category::Humor | Category::Sarcasm | Category::Offense => 4,
            Category::Motivation => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Sentiment => "sentiment",
            Category::Humor => "humor",
            Category::Sarcasm => "sarcasm",
            Category::Offense => "offense",
            Category::Motivation => "motivation",
        }
    }

    pub fn index(self) -> usize {
        CATEGORIES.iter().position(|&c| c == self).unwrap()
    }

    /// Canonical label spellings, indexed by ordinal.
    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            Category::Sentiment => &["negative", "neutral", "positive"],
            Category::Humor => &["not_funny", "funny", "very_funny", "hilarious"],
            Category::Sarcasm => &["not_sarcastic", "general", "twisted_meaning", "very_twisted"],
            Category::Offense => &["not_offensive", "slight", "very_offensive", "hateful_offensive"],
            Category::Motivation => &["not_motivational", "motivational"],
        }
    }
}

/// Fine-grained labels: sentiment 0..3 (negative/neutral/positive), humor,
/// sarcasm and offense 0..4 (0 = absent, then increasing intensity),
/// motivation 0..2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelSet {
    pub sentiment: u8,
    pub humor: u8,
    pub sarcasm: u8,
    pub offense: u8,
    pub motivation: u8,
}

impl LabelSet {
    pub fn new(sentiment: u8, humor: u8, sarcasm: u8, offense: u8, motivation: u8) -> Result<Self> {
        let set = LabelSet {
            sentiment,
            humor,
            sarcasm,
            offense,
            motivation,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        for cat in CATEGORIES {
            let v = self.get(cat);
            if v as usize >= cat.class_count() {
                return Err(Error::Input(format!(
                    "{} label {v} outside 0..{}",
                    cat.name(),
                    cat.class_count()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, cat: Category) -> u8 {
        match cat {
            Category::Sentiment => self.sentiment,
            Category::Humor => self.humor,
            Category::Sarcasm => self.sarcasm,
            Category::Offense => self.offense,
            Category::Motivation => self.motivation,
        }
    }

    pub fn set(&mut self, cat: Category, value: u8) {
        match cat {
            Category::Sentiment => self.sentiment = value,
            Category::Humor => self.humor = value,
            Category::Sarcasm => self.sarcasm = value,
            Category::Offense => self.offense = value,
            Category::Motivation => self.motivation = value,
        }
    }

    /// Binary value of one category: intensity scales collapse to
    /// present/absent, motivation is already binary, sentiment is untouched
    /// by the coarse view and passes through.
    pub fn coarse_value(cat: Category, fine: u8) -> u8 {
        match cat {
            Category::Humor | Category::Sarcasm | Category::Offense => (fine > 0) as u8,
            Category::Motivation | Category::Sentiment => fine,
        }
    }

    /// The coarse (binary-category) view of this label set.
    pub fn coarse(&self) -> LabelSet {
        LabelSet {
            sentiment: self.sentiment,
            humor: Self::coarse_value(Category::Humor, self.humor),
            sarcasm: Self::coarse_value(Category::Sarcasm, self.sarcasm),
            offense: Self::coarse_value(Category::Offense, self.offense),
            motivation: self.motivation,
        }
    }
}

/// One preprocessed sample: decoded image, tokenized text, labels.
#[derive(Debug, Clone)]
pub struct MemeSample {
    pub id: String,
    pub image: Tensor,
    pub text: EncodedText,
    pub labels: LabelSet,
}
