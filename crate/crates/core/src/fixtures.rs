//! Shared trained models for unit tests.

use std::sync::OnceLock;

use crate::victim::{synth_corpus, train_victim, Utterance, VictimConfig, VictimModel, Vocabulary};

pub(crate) struct VictimFixture {
    pub vocab: Vocabulary,
    pub corpus: Vec<Utterance>,
    pub model: VictimModel,
}

pub(crate) fn victim() -> &'static VictimFixture {
    static F: OnceLock<VictimFixture> = OnceLock::new();
    F.get_or_init(|| {
        let vocab = Vocabulary::standard(4).unwrap();
        let corpus = synth_corpus(&vocab, 20, (1, 3), 11).unwrap();
        let model = train_victim(&corpus, &vocab, &VictimConfig::default()).unwrap();
        VictimFixture { vocab, corpus, model }
    })
}
