use rand::Rng;

use super::gru::GruCell;
use crate::diffcore::{Graph, ParamId, ParameterStore, Var};
use crate::error::{ensure, Result};

/// Id reserved for out-of-vocabulary words.
pub const UNK: usize = 0;

/// Word embedding table followed by a gated recurrent encoder; the last hidden state is the question vector.
#[derive(Clone, Debug, PartialEq)]
pub struct QuestionEncoder {
    pub vocab: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub embedding: ParamId,
    pub cell: GruCell,
}

impl QuestionEncoder {
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(vocab > 0 && embed_dim > 0, "vocabulary and embedding sizes must be positive");
        let embedding = store.insert_glorot(format!("{prefix}.embedding"), vocab, embed_dim, rng)?;
        let cell = GruCell::register(store, &format!("{prefix}.gru"), embed_dim, hidden, rng)?;
        Ok(QuestionEncoder {
            vocab,
            embed_dim,
            max_len,
            embedding,
            cell,
        })
    }

    pub fn bind(
        store: &ParameterStore,
        prefix: &str,
        vocab: usize,
        embed_dim: usize,
        hidden: usize,
        max_len: usize,
    ) -> Result<Self> {
        let embedding = store.id(&format!("{prefix}.embedding"))?;
        ensure!(
            store.value(embedding).shape() == [vocab, embed_dim],
            "{prefix}.embedding has shape {:?}, expected [{vocab}, {embed_dim}]",
            store.value(embedding).shape()
        );
        let cell = GruCell::bind(store, &format!("{prefix}.gru"), embed_dim, hidden)?;
        Ok(QuestionEncoder {
            vocab,
            embed_dim,
            max_len,
            embedding,
            cell,
        })
    }

    pub fn hidden(&self) -> usize {
        self.cell.hidden
    }

    pub fn validate(&self, tokens: &[usize]) -> Result<()> {
        ensure!(!tokens.is_empty(), "question has no tokens");
        ensure!(
            tokens.len() <= self.max_len,
            "question has {} tokens, maximum is {}",
            tokens.len(),
            self.max_len
        );
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab) {
            return Err(crate::Error::contract(format!(
                "token id {bad} outside vocabulary of size {}",
                self.vocab
            )));
        }
        Ok(())
    }

    /// One embedding row per token.
    pub fn embed(&self, g: &mut Graph, tokens: &[usize]) -> Result<Vec<Var>> {
        self.validate(tokens)?;
        let table = g.param(self.embedding);
        tokens.iter().map(|&t| g.row(table, t)).collect()
    }

    pub fn encode(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        let xs = self.embed(g, tokens)?;
        self.cell.encode(g, &xs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(seed: u64) -> (ParameterStore, QuestionEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let enc = QuestionEncoder::register(&mut store, "q", 10, 4, 5, 8, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn lookup_returns_table_rows() {
        let (store, enc) = encoder(1);
        let mut g = Graph::new(&store);
        let xs = enc.embed(&mut g, &[0, 3, 3]).unwrap();
        assert_eq!(g.value(xs[0]).data(), store.value(enc.embedding).row(0));
        assert_eq!(g.value(xs[1]), g.value(xs[2]));
    }

    #[test]
    fn out_of_vocabulary_and_empty_rejected() {
        let (store, enc) = encoder(1);
        let mut g = Graph::new(&store);
        assert!(enc.embed(&mut g, &[10]).is_err());
        assert!(enc.encode(&mut g, &[]).is_err());
        assert!(enc.encode(&mut g, &[1; 9]).is_err());
    }

    #[test]
    fn single_token_is_one_step_from_zero() {
        let (store, enc) = encoder(2);
        let mut g = Graph::new(&store);
        let q = enc.encode(&mut g, &[4]).unwrap();
        let table = g.param(enc.embedding);
        let x = g.row(table, 4).unwrap();
        let h0 = g.constant(Tensor::zeros(&[5]));
        let h1 = enc.cell.step(&mut g, x, h0).unwrap();
        assert_eq!(g.value(q), g.value(h1));
    }

    #[test]
    fn word_order_matters_and_encoding_is_pure() {
        let (store, enc) = encoder(3);
        let run = |toks: &[usize]| {
            let mut g = Graph::new(&store);
            let q = enc.encode(&mut g, toks).unwrap();
            g.value(q).clone()
        };
        assert_ne!(run(&[1, 2, 3]), run(&[3, 2, 1]));
        assert_eq!(run(&[1, 2, 3]), run(&[1, 2, 3]));
    }

    #[test]
    fn embedding_gradient_matches_finite_differences() {
        let (mut store, enc) = encoder(4);
        let report = gradcheck::gradient_check("question", &mut store, |g| {
            let q = enc.encode(g, &[2, 7, 2, 5])?;
            let t = g.tanh(q);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
