use crate::config::Config;
use crate::data::image::GrayImage;
use crate::data::vocab::Vocabulary;
use crate::decoder::{AttendedMemory, Decoder};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::param::{Bound, ParamStore};
use crate::rng;
use crate::tape::{BatchStats, Tape};
use crate::tensor::Tensor;

const INIT_TAG: u64 = 0x494e_4954;

/// Encoder, decoder and the parameters they share a store with.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: Config,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    /// Fresh parameters drawn from the `seed` stream.
    pub fn new(config: &Config, vocab: Vocabulary) -> Result<Model> {
        Self::from_store(config, vocab, ParamStore::new())
    }

    /// Builds around existing parameters, creating any that are missing and
    /// checking the shapes of the rest.
    pub fn from_store(config: &Config, vocab: Vocabulary, mut store: ParamStore) -> Result<Model> {
        config.validate()?;
        let mut r = rng::stream(config.seed, &[INIT_TAG]);
        let encoder = Encoder::build(config.encoder_config(), &mut store, &mut r)?;
        let decoder = Decoder::build(config.decoder_config(vocab.len()), &mut store, &mut r)?;
        Ok(Model {
            config: config.clone(),
            vocab,
            store,
            encoder,
            decoder,
        })
    }

    /// Stacks equally sized images into `[N, 1, H, W]`.
    pub fn batch_tensor(images: &[&GrayImage]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Invalid("empty image batch".into()))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(images.len() * w * h);
        for img in images {
            if (img.width, img.height) != (w, h) {
                return Err(Error::shape(
                    "batch",
                    &[&[h, w], &[img.height, img.width]],
                    "images in a batch must share a size",
                ));
            }
            data.extend_from_slice(&img.pixels);
        }
        Tensor::new([images.len(), 1, h, w], data)
    }

    /// Encodes a batch and attaches every memory bank to the decoder.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        images: &[&GrayImage],
        train: bool,
    ) -> Result<(Vec<AttendedMemory>, Vec<BatchStats>)> {
        let x = tape.constant(Self::batch_tensor(images)?);
        let (banks, stats) = self.encoder.encode(tape, bound, &self.store, x, train)?;
        let mems = banks
            .iter()
            .map(|b| self.decoder.attach(tape, bound, b))
            .collect::<Result<Vec<_>>>()?;
        Ok((mems, stats))
    }

    /// Inference-mode memory bank for a single padded image.
    pub fn encode_one(&self, tape: &mut Tape, bound: &Bound, image: &GrayImage) -> Result<AttendedMemory> {
        let (mut mems, _) = self.encode_batch(tape, bound, &[image], false)?;
        Ok(mems.pop().expect("one image in, one bank out"))
    }

    pub fn num_parameters(&self) -> usize {
        self.store.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}
