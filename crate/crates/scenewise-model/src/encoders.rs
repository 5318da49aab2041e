//! The six disentangled encoders: global, object, and relation towers on
//! both the vision and text sides, all projecting into one shared space.
//!
//! Each tower is a small pre-LN transformer. Vision towers patchify the
//! input, prepend a class token, and project the class token; text towers
//! embed whitespace tokens and project the end-of-sequence token. Vision
//! towers additionally expose their patch-token grid (after the final norm,
//! before projection) for localization and relevance maps.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use scenewise_data::{LabelVocab, SceneRecord};

use crate::error::{ModelError, Result};
use crate::interp::crop_resize;
use crate::nn::{linear, normal_init, transformer_block, ParamBinding, ParamStore};
use crate::tape::{NodeId, Tape};

/// Hidden width multiplier of the transformer MLP blocks.
const MLP_RATIO: usize = 4;
/// Initialization standard deviation for weight matrices.
const INIT_STD: f64 = 0.02;

/// End-of-sequence token id; every encoded sequence ends with it.
pub const EOS_ID: usize = 0;
/// Unknown-word token id.
pub const UNK_ID: usize = 1;

/// Whitespace word vocabulary with reserved EOS and UNK slots.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TokenVocab {
    /// Builds a vocabulary from arbitrary phrases; words are lowercased and
    /// split on whitespace, deduplicated, and sorted for determinism.
    pub fn from_phrases<I, S>(phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut words: Vec<String> = phrases
            .into_iter()
            .flat_map(|p| {
                p.as_ref()
                    .to_lowercase()
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>()
            })
            .collect();
        words.sort();
        words.dedup();
        let mut tokens = vec!["<eos>".to_string(), "<unk>".to_string()];
        tokens.extend(words.into_iter().filter(|w| w != "<eos>" && w != "<unk>"));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Vocabulary covering a dataset's labels plus prompt-template wording
    /// and the antonym predicates used by negative triplets.
    pub fn from_label_vocab(vocab: &LabelVocab, extra_phrases: &[&str]) -> Self {
        let mut phrases: Vec<String> = Vec::new();
        phrases.extend(vocab.actions.iter().cloned());
        phrases.extend(vocab.objects.iter().cloned());
        phrases.extend(vocab.relations.iter().cloned());
        for (_, opposite) in scenewise_data::builtin_antonyms().entries() {
            phrases.push(opposite.clone());
        }
        phrases.extend(extra_phrases.iter().map(|s| s.to_string()));
        Self::from_phrases(phrases)
    }

    /// Rebuilds a vocabulary from a serialized token list; the reserved
    /// EOS and UNK slots must be present and all tokens unique.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[EOS_ID] != "<eos>" || tokens[UNK_ID] != "<unk>" {
            return Err(ModelError::InvalidInput(
                "token list must start with <eos>, <unk>".into(),
            ));
        }
        let index: BTreeMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        if index.len() != tokens.len() {
            return Err(ModelError::InvalidInput("duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes a phrase: lowercase, whitespace split, unknown words to UNK,
    /// EOS appended; truncated to `max_tokens` keeping EOS last.
    pub fn encode(&self, text: &str, max_tokens: usize) -> Vec<usize> {
        assert!(max_tokens >= 1, "max_tokens must be at least 1");
        let mut ids: Vec<usize> = text
            .to_lowercase()
            .split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK_ID))
            .collect();
        ids.truncate(max_tokens - 1);
        ids.push(EOS_ID);
        ids
    }
}

/// Architecture hyperparameters shared by all six towers.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Shared embedding dimension d.
    pub embed_dim: usize,
    /// Square patch edge in pixels.
    pub patch_size: usize,
    /// Transformer depth per tower.
    pub depth: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Text sequence length cap, including the EOS token.
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { embed_dim: 64, patch_size: 16, depth: 2, heads: 4, max_tokens: 8 }
    }
}

impl EncoderConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 || self.heads == 0 || self.max_tokens == 0 {
            return Err(ModelError::InvalidConfig(
                "encoder dimensions must be positive".into(),
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size == 0 || image_size % self.patch_size != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "patch_size {} must divide image_size {image_size}",
                self.patch_size
            )));
        }
        Ok(())
    }

    /// Patches per side of the input grid.
    pub fn grid_side(&self, image_size: usize) -> usize {
        image_size / self.patch_size
    }

    /// Total patch count.
    pub fn n_patches(&self, image_size: usize) -> usize {
        let side = self.grid_side(image_size);
        side * side
    }
}

/// The six encoder towers addressed by alignment level and modality.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    VisualGlobal,
    VisualObject,
    VisualRelation,
    TextGlobal,
    TextObject,
    TextRelation,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::VisualGlobal => "v_g",
            Tower::VisualObject => "v_o",
            Tower::VisualRelation => "v_r",
            Tower::TextGlobal => "t_g",
            Tower::TextObject => "t_o",
            Tower::TextRelation => "t_r",
        }
    }

    pub fn is_visual(self) -> bool {
        matches!(
            self,
            Tower::VisualGlobal | Tower::VisualObject | Tower::VisualRelation
        )
    }
}

const VISUAL_TOWERS: [Tower; 3] = [Tower::VisualGlobal, Tower::VisualObject, Tower::VisualRelation];
const TEXT_TOWERS: [Tower; 3] = [Tower::TextGlobal, Tower::TextObject, Tower::TextRelation];

/// Alignment levels of the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Global,
    Object,
    Relation,
}

impl Level {
    pub fn temp_name(self) -> &'static str {
        match self {
            Level::Global => "temp.global",
            Level::Object => "temp.object",
            Level::Relation => "temp.relation",
        }
    }

    pub fn towers(self) -> (Tower, Tower) {
        match self {
            Level::Global => (Tower::VisualGlobal, Tower::TextGlobal),
            Level::Object => (Tower::VisualObject, Tower::TextObject),
            Level::Relation => (Tower::VisualRelation, Tower::TextRelation),
        }
    }
}

/// Per-scene embeddings from all six towers.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    pub v_g: Array1<f64>,
    pub v_o: Array2<f64>,
    pub v_r: Array2<f64>,
    pub t_g: Array1<f64>,
    pub t_o: Array2<f64>,
    pub t_r: Array2<f64>,
    pub n_o: usize,
    pub n_r: usize,
}

/// Tape nodes for one scene's student forward pass, each 1 x d or rows x d.
pub struct SceneNodes {
    pub v_g: NodeId,
    pub v_o: Option<NodeId>,
    pub v_r: Option<NodeId>,
    pub t_g: NodeId,
    pub t_o: Option<NodeId>,
    pub t_r: Option<NodeId>,
    /// Per-relation stacks of negative-caption text embeddings.
    pub t_r_negatives: Vec<NodeId>,
    pub n_o: usize,
    pub n_r: usize,
}

/// The full model: six towers, per-level contrastive temperatures, and the
/// distillation temperature, all in one named parameter store.
#[derive(Debug, Clone)]
pub struct ScenarioModel {
    pub config: EncoderConfig,
    pub image_size: usize,
    pub vocab: TokenVocab,
    pub params: ParamStore,
}

impl ScenarioModel {
    /// Fresh model with Gaussian-initialized weights.
    pub fn new(
        config: EncoderConfig,
        image_size: usize,
        vocab: TokenVocab,
        seed: u64,
    ) -> Result<Self> {
        config.validate(image_size)?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let patch_dim = config.patch_size * config.patch_size * 3;
        let n_patches = config.n_patches(image_size);
        for tower in VISUAL_TOWERS {
            let p = tower.prefix();
            params.insert(&format!("{p}.pe.w"), normal_init(&mut rng, patch_dim, d, INIT_STD));
            params.insert(&format!("{p}.pe.b"), Array2::zeros((1, d)));
            params.insert(&format!("{p}.cls"), normal_init(&mut rng, 1, d, INIT_STD));
            params.insert(&format!("{p}.pos"), Array2::zeros((n_patches + 1, d)));
            Self::init_blocks(&mut params, &mut rng, p, &config);
        }
        for tower in TEXT_TOWERS {
            let p = tower.prefix();
            params.insert(&format!("{p}.tok"), normal_init(&mut rng, vocab.len(), d, INIT_STD));
            params.insert(&format!("{p}.pos"), Array2::zeros((config.max_tokens, d)));
            Self::init_blocks(&mut params, &mut rng, p, &config);
        }
        let log_temp = 0.07f64.ln();
        params.insert("temp.global", Array2::from_elem((1, 1), log_temp));
        params.insert("temp.object", Array2::from_elem((1, 1), log_temp));
        params.insert("temp.relation", Array2::from_elem((1, 1), log_temp));
        params.insert("tau.log", Array2::zeros((1, 1)));
        Ok(Self { config, image_size, vocab, params })
    }

    fn init_blocks(
        params: &mut ParamStore,
        rng: &mut ChaCha20Rng,
        prefix: &str,
        config: &EncoderConfig,
    ) {
        let d = config.embed_dim;
        let hidden = MLP_RATIO * d;
        for blk in 0..config.depth {
            let b = format!("{prefix}.blk{blk}");
            params.insert(&format!("{b}.ln1.g"), Array2::ones((1, d)));
            params.insert(&format!("{b}.ln1.b"), Array2::zeros((1, d)));
            for w in ["wq", "wk", "wv", "wo"] {
                params.insert(&format!("{b}.attn.{w}"), normal_init(rng, d, d, INIT_STD));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                params.insert(&format!("{b}.attn.{bias}"), Array2::zeros((1, d)));
            }
            params.insert(&format!("{b}.ln2.g"), Array2::ones((1, d)));
            params.insert(&format!("{b}.ln2.b"), Array2::zeros((1, d)));
            params.insert(&format!("{b}.mlp.w1"), normal_init(rng, d, hidden, INIT_STD));
            params.insert(&format!("{b}.mlp.b1"), Array2::zeros((1, hidden)));
            params.insert(&format!("{b}.mlp.w2"), normal_init(rng, hidden, d, INIT_STD));
            params.insert(&format!("{b}.mlp.b2"), Array2::zeros((1, d)));
        }
        params.insert(&format!("{prefix}.lnf.g"), Array2::ones((1, d)));
        params.insert(&format!("{prefix}.lnf.b"), Array2::zeros((1, d)));
        params.insert(&format!("{prefix}.head.w"), normal_init(rng, d, d, INIT_STD));
        params.insert(&format!("{prefix}.head.b"), Array2::zeros((1, d)));
    }

    /// Current contrastive temperature at a level (exp of the stored log).
    pub fn temperature(&self, level: Level) -> f64 {
        self.params.get(level.temp_name())[[0, 0]].exp()
    }

    /// Current distillation temperature.
    pub fn tau(&self) -> f64 {
        self.params.get("tau.log")[[0, 0]].exp()
    }

    /// Flattens an image into raster-ordered patch rows: for each patch,
    /// pixels in row-major order with their three channels interleaved.
    pub fn patchify(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let (h, w, c) = image.dim();
        if h != self.image_size || w != self.image_size || c != 3 {
            return Err(ModelError::InvalidInput(format!(
                "expected {0}x{0}x3 image, got {h}x{w}x{c}",
                self.image_size
            )));
        }
        let p = self.config.patch_size;
        let side = self.config.grid_side(self.image_size);
        let mut out = Array2::zeros((side * side, p * p * 3));
        for py in 0..side {
            for px in 0..side {
                let row = py * side + px;
                let mut col = 0;
                for dy in 0..p {
                    for dx in 0..p {
                        for ch in 0..3 {
                            out[[row, col]] = image[[py * p + dy, px * p + dx, ch]];
                            col += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Builds the visual tower forward pass on a tape. Returns the projected
    /// class embedding (1 x d) and the patch tokens (n_patches x d) taken
    /// after the final layer norm, before projection.
    pub fn image_nodes(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        tower: Tower,
        image: &Array3<f64>,
    ) -> Result<(NodeId, NodeId)> {
        let (encoded, n_patches) = self.sequence_nodes(tape, binding, tower, image)?;
        let tokens = tape.slice_rows(encoded, 1, n_patches + 1);
        let cls_row = tape.slice_rows(encoded, 0, 1);
        let p = tower.prefix();
        let emb = linear(
            tape,
            cls_row,
            binding.id(&format!("{p}.head.w")),
            binding.id(&format!("{p}.head.b")),
        );
        Ok((emb, tokens))
    }

    /// Builds the visual tower up to the final layer norm. Returns the full
    /// token sequence (class token in row 0, patches after) and the patch
    /// count.
    pub fn sequence_nodes(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        tower: Tower,
        image: &Array3<f64>,
    ) -> Result<(NodeId, usize)> {
        assert!(tower.is_visual(), "sequence_nodes requires a visual tower");
        let p = tower.prefix();
        let patches = self.patchify(image)?;
        let n_patches = patches.nrows();
        let x = tape.constant(patches);
        let x = linear(tape, x, binding.id(&format!("{p}.pe.w")), binding.id(&format!("{p}.pe.b")));
        let cls = binding.id(&format!("{p}.cls"));
        let seq = tape.concat_rows(&[cls, x]);
        let seq = tape.add(seq, binding.id(&format!("{p}.pos")));
        let encoded = self.run_blocks(tape, binding, p, seq);
        Ok((encoded, n_patches))
    }

    /// Inference-mode token sequence after the final layer norm: class token
    /// in row 0, patch tokens in raster order after it.
    pub fn token_sequence(&self, tower: Tower, image: &Array3<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let (encoded, _) = self.sequence_nodes(&mut tape, &binding, tower, image)?;
        Ok(tape.value(encoded).clone())
    }

    /// Builds the text tower forward pass on a tape; returns the projected
    /// EOS embedding (1 x d).
    pub fn text_nodes(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        tower: Tower,
        text: &str,
    ) -> NodeId {
        assert!(!tower.is_visual(), "text_nodes requires a text tower");
        let p = tower.prefix();
        let ids = self.vocab.encode(text, self.config.max_tokens);
        let len = ids.len();
        let tok = tape.gather_rows(binding.id(&format!("{p}.tok")), &ids);
        let pos = tape.slice_rows(binding.id(&format!("{p}.pos")), 0, len);
        let seq = tape.add(tok, pos);
        let encoded = self.run_blocks(tape, binding, p, seq);
        let eos_row = tape.slice_rows(encoded, len - 1, len);
        linear(
            tape,
            eos_row,
            binding.id(&format!("{p}.head.w")),
            binding.id(&format!("{p}.head.b")),
        )
    }

    fn run_blocks(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        prefix: &str,
        mut x: NodeId,
    ) -> NodeId {
        for blk in 0..self.config.depth {
            x = transformer_block(tape, binding, &format!("{prefix}.blk{blk}"), x, self.config.heads);
        }
        tape.layer_norm(
            x,
            binding.id(&format!("{prefix}.lnf.g")),
            binding.id(&format!("{prefix}.lnf.b")),
            1e-5,
        )
    }

    /// Inference-mode image embedding plus the patch-token grid.
    pub fn embed_image(&self, tower: Tower, image: &Array3<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let (emb, tokens) = self.image_nodes(&mut tape, &binding, tower, image)?;
        Ok((
            tape.value(emb).row(0).to_owned(),
            tape.value(tokens).clone(),
        ))
    }

    /// Inference-mode text embedding.
    pub fn embed_text(&self, tower: Tower, text: &str) -> Array1<f64> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape, false);
        let emb = self.text_nodes(&mut tape, &binding, tower, text);
        tape.value(emb).row(0).to_owned()
    }

    /// Resizes an object crop to the encoder input square.
    pub fn prepare_crop(&self, image: &Array3<f64>, bbox: &scenewise_data::BoundingBox) -> Array3<f64> {
        crop_resize(image, bbox, self.image_size)
    }

    /// Builds the full six-tower forward pass for one scene on a tape.
    /// `with_negatives` additionally embeds each relation's negative
    /// captions through the relation text tower.
    pub fn scene_nodes(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        record: &SceneRecord,
        with_negatives: bool,
    ) -> Result<SceneNodes> {
        let (v_g, _) = self.image_nodes(tape, binding, Tower::VisualGlobal, &record.image)?;
        let mut v_o_rows = Vec::with_capacity(record.objects.len());
        let mut t_o_rows = Vec::with_capacity(record.objects.len());
        for obj in &record.objects {
            let crop = self.prepare_crop(&record.image, &obj.bbox);
            let (e, _) = self.image_nodes(tape, binding, Tower::VisualObject, &crop)?;
            v_o_rows.push(e);
            t_o_rows.push(self.text_nodes(tape, binding, Tower::TextObject, &obj.name));
        }
        let mut v_r_rows = Vec::with_capacity(record.relations.len());
        let mut t_r_rows = Vec::with_capacity(record.relations.len());
        let mut t_r_negatives = Vec::new();
        for rel in &record.relations {
            let (e, _) =
                self.image_nodes(tape, binding, Tower::VisualRelation, &rel.focused_region)?;
            v_r_rows.push(e);
            let caption = scenewise_data::triplet_caption(&rel.triplet);
            t_r_rows.push(self.text_nodes(tape, binding, Tower::TextRelation, &caption));
            if with_negatives {
                if rel.negatives.is_empty() {
                    return Err(ModelError::InvalidInput(
                        "relation has no negative triplets".into(),
                    ));
                }
                let rows: Vec<NodeId> = rel
                    .negatives
                    .iter()
                    .map(|neg| {
                        let cap = scenewise_data::triplet_caption(neg);
                        self.text_nodes(tape, binding, Tower::TextRelation, &cap)
                    })
                    .collect();
                t_r_negatives.push(tape.concat_rows(&rows));
            }
        }
        let t_g = self.text_nodes(tape, binding, Tower::TextGlobal, &record.action);
        let stack = |tape: &mut Tape, rows: &[NodeId]| {
            if rows.is_empty() {
                None
            } else {
                Some(tape.concat_rows(rows))
            }
        };
        Ok(SceneNodes {
            v_g,
            v_o: stack(tape, &v_o_rows),
            v_r: stack(tape, &v_r_rows),
            t_g,
            t_o: stack(tape, &t_o_rows),
            t_r: stack(tape, &t_r_rows),
            t_r_negatives,
            n_o: record.objects.len(),
            n_r: record.relations.len(),
        })
    }

    /// Inference-mode forward pass over a whole scene.
    pub fn forward_scene(&self, record: &SceneRecord) -> Result<EmbeddingSet> {
        self.forward_scene_with(&self.params, record)
    }

    /// Scene forward pass through an alternative parameter set with the
    /// same shapes (used for the EMA teacher).
    pub fn forward_scene_with(
        &self,
        params: &ParamStore,
        record: &SceneRecord,
    ) -> Result<EmbeddingSet> {
        let mut tape = Tape::new();
        let binding = params.bind(&mut tape, false);
        let nodes = self.scene_nodes(&mut tape, &binding, record, false)?;
        let d = self.config.embed_dim;
        let block = |tape: &Tape, id: Option<NodeId>| match id {
            Some(n) => tape.value(n).clone(),
            None => Array2::zeros((0, d)),
        };
        let set = EmbeddingSet {
            v_g: tape.value(nodes.v_g).row(0).to_owned(),
            v_o: block(&tape, nodes.v_o),
            v_r: block(&tape, nodes.v_r),
            t_g: tape.value(nodes.t_g).row(0).to_owned(),
            t_o: block(&tape, nodes.t_o),
            t_r: block(&tape, nodes.t_r),
            n_o: nodes.n_o,
            n_r: nodes.n_r,
        };
        for v in set
            .v_g
            .iter()
            .chain(set.t_g.iter())
            .chain(set.v_o.iter())
            .chain(set.v_r.iter())
            .chain(set.t_o.iter())
            .chain(set.t_r.iter())
        {
            if !v.is_finite() {
                return Err(ModelError::InvalidInput(
                    "non-finite embedding in scene forward".into(),
                ));
            }
        }
        Ok(set)
    }
}
