//! On-disk model bundle: candidate generator plus trained disambiguator
//! counts, stored as versioned JSON.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::candidates::DictionaryGenerator;
use crate::corpus_io::Sentence;
use crate::disambig::{DisambiguatorModel, FrequencyModel, HmmModel};
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "lemir-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub format: String,
    pub version: u32,
    pub generator: DictionaryGenerator,
    pub disambiguator: DisambiguatorModel,
}

impl ModelBundle {
    pub fn new(generator: DictionaryGenerator, disambiguator: DisambiguatorModel) -> Self {
        ModelBundle {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            generator,
            disambiguator,
        }
    }

    pub fn train_frequency(train: &[Sentence]) -> Self {
        Self::new(
            DictionaryGenerator::build(train),
            DisambiguatorModel::Frequency(FrequencyModel::train(train)),
        )
    }

    pub fn train_hmm(train: &[Sentence], alpha: f64, beta: f64) -> Result<Self> {
        Ok(Self::new(
            DictionaryGenerator::build(train),
            DisambiguatorModel::Hmm(HmmModel::train(train, alpha, beta)?),
        ))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load<R: BufRead>(reader: R) -> Result<Self> {
        let bundle: ModelBundle = serde_json::from_reader(reader)?;
        if bundle.format != MODEL_FORMAT || bundle.version != MODEL_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format {} v{}",
                bundle.format, bundle.version
            )));
        }
        Ok(bundle)
    }
}
