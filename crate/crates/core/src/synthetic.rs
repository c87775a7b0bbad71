//! Seeded synthetic worlds for tests, demos and the shipped fixture.
//!
//! Entity names and facts are pronounceable pseudo-words, so every content
//! token's correct knowledge item is known by construction.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use crate::corpus::{
    dialog_corpus_to_jsonl, knowledge_base_from_articles, tokenize, Article, DialogExample, KnowledgeBase,
    StopwordList,
};
use crate::error::{Error, Result};
use crate::numerics::Rng;

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "sk"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "s"];

/// Distinct pseudo-words that avoid stopwords and `reserved`.
pub struct WordForge {
    rng: Rng,
    used: HashSet<String>,
    stopwords: StopwordList,
}

impl WordForge {
    pub fn new(rng: Rng, reserved: &[&str]) -> Self {
        WordForge {
            rng,
            used: reserved.iter().map(|w| w.to_string()).collect(),
            stopwords: StopwordList::default(),
        }
    }

    pub fn word(&mut self) -> String {
        loop {
            let syllables = 2 + self.rng.below(2);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSETS[self.rng.below(ONSETS.len())]);
                w.push_str(VOWELS[self.rng.below(VOWELS.len())]);
            }
            w.push_str(CODAS[self.rng.below(CODAS.len())]);
            if !self.stopwords.contains(&w) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn kb_from(articles: &[Article]) -> Result<KnowledgeBase> {
    let mut text = String::new();
    for a in articles {
        text.push_str(&serde_json::to_string(a).map_err(|e| Error::Config(e.to_string()))?);
        text.push('\n');
    }
    knowledge_base_from_articles(&text)
}

/// A held-out sentence with one probe position and its correct item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Probe {
    pub text: String,
    pub token_index: usize,
    pub knowledge_id: usize,
}

impl Probe {
    fn new(template: &str, word: &str, knowledge_id: usize) -> Probe {
        let text = template.replace("{}", word);
        let token_index = tokenize(&text).iter().position(|t| t == word).expect("template holds the word");
        Probe {
            text,
            token_index,
            knowledge_id,
        }
    }
}

const CATEGORIES: &[&str] = &[
    "village", "river", "mountain", "festival", "dance", "bird", "beetle", "tree", "bread", "boat", "song", "stone",
];
const REGIONS: &[&str] = &["north", "south", "east", "west", "coast", "valley", "islands", "plains", "desert", "highlands"];
const QUERY_TEMPLATES: &[&str] = &[
    "have you ever heard of {} ?",
    "i read something about {} last night",
    "my friend keeps talking about {}",
    "{} came up in class today",
    "what do you think of {} ?",
];

/// Encyclopedia whose first sentences each carry three tokens found in no
/// other article: the title and two descriptors.
pub struct RetrievalFixture {
    pub articles: Vec<Article>,
    pub kb: KnowledgeBase,
    /// Non-stopword tokens that occur in exactly one knowledge sentence.
    pub unique_tokens: BTreeMap<String, usize>,
    /// Unique tokens placed in sentences that never occur in the KB.
    pub probes: Vec<Probe>,
}

pub fn retrieval_fixture(n_articles: usize, seed: u64) -> Result<RetrievalFixture> {
    let root = Rng::new(seed);
    let mut forge = WordForge::new(root.fork("words"), &[CATEGORIES, REGIONS].concat());
    let mut rng = root.fork("layout");
    let mut articles = Vec::with_capacity(n_articles);
    for _ in 0..n_articles {
        let title = forge.word();
        let (u1, u2) = (forge.word(), forge.word());
        let cat = CATEGORIES[rng.below(CATEGORIES.len())];
        let region = REGIONS[rng.below(REGIONS.len())];
        articles.push(Article {
            title: capitalize(&title),
            text: format!(
                "{} is a {cat} from the {region}, known for {u1} and {u2}. It was described by travellers long ago.",
                capitalize(&title)
            ),
        });
    }
    let kb = kb_from(&articles)?;
    let unique_tokens = unique_content_tokens(&kb, &StopwordList::default());
    let mut probes = Vec::new();
    for (word, &id) in &unique_tokens {
        let t = QUERY_TEMPLATES[rng.below(QUERY_TEMPLATES.len())];
        probes.push(Probe::new(t, word, id));
    }
    Ok(RetrievalFixture {
        articles,
        kb,
        unique_tokens,
        probes,
    })
}

/// Non-stopword tokens that appear in exactly one knowledge sentence.
pub fn unique_content_tokens(kb: &KnowledgeBase, stopwords: &StopwordList) -> BTreeMap<String, usize> {
    let mut owners: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for item in kb.items() {
        for t in tokenize(&item.text) {
            if !stopwords.contains(&t) {
                owners.entry(t).or_default().insert(item.id);
            }
        }
    }
    owners
        .into_iter()
        .filter(|(_, ids)| ids.len() == 1)
        .map(|(t, ids)| (t, ids.into_iter().next().unwrap_or_default()))
        .collect()
}

/// Ambiguous words, each used in two articles with different neighbours.
const POLYSEMY: &[(&str, &str, &str, &str, &str)] = &[
    ("bank", "Riverside", "The bank of the river was covered in reeds and mud.", "Lending", "The bank lent money to the merchant for his trade."),
    ("bat", "Cave", "The bat flew out of the dark cave at night.", "Cricket", "The bat struck the ball across the green field."),
    ("crane", "Marsh", "The crane waded through the marsh hunting frogs.", "Harbour", "The crane lifted steel containers onto the ship."),
    ("spring", "Season", "The spring brought warm rain and blossoms to the orchard.", "Mattress", "The spring inside the mattress squeaked under weight."),
];

pub struct PolysemyFixture {
    pub articles: Vec<Article>,
    pub kb: KnowledgeBase,
    /// (ambiguous word, probe for its first sense, probe for its second).
    pub pairs: Vec<(String, Probe, Probe)>,
}

pub fn polysemy_fixture() -> Result<PolysemyFixture> {
    let mut articles = Vec::new();
    let mut pairs = Vec::new();
    for &(word, t1, s1, t2, s2) in POLYSEMY {
        let a = articles.len();
        articles.push(Article {
            title: t1.into(),
            text: s1.into(),
        });
        articles.push(Article {
            title: t2.into(),
            text: s2.into(),
        });
        pairs.push((word.to_string(), Probe::new(s1, word, a), Probe::new(s2, word, a + 1)));
    }
    let kb = kb_from(&articles)?;
    for (w, p, q) in &mut pairs {
        p.text = kb.items()[p.knowledge_id].text.clone();
        q.text = kb.items()[q.knowledge_id].text.clone();
        p.token_index = tokenize(&p.text).iter().position(|t| t == w).unwrap_or(0);
        q.token_index = tokenize(&q.text).iter().position(|t| t == w).unwrap_or(0);
    }
    Ok(PolysemyFixture { articles, kb, pairs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogFixtureConfig {
    pub entities: usize,
    pub facts_per_entity: usize,
    pub train_pairs: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    /// Share of gold responses replaced by a non-committal reply.
    pub safe_fraction: f64,
    /// Share of entities that are rare in the training dialogs.
    pub rare_fraction: f64,
    /// Sampling weight of a rare entity relative to a common one when
    /// drawing training and validation pairs. Test pairs weight all
    /// entities equally.
    pub rare_weight: f64,
}

impl Default for DialogFixtureConfig {
    fn default() -> Self {
        DialogFixtureConfig {
            entities: 40,
            facts_per_entity: 3,
            train_pairs: 2000,
            valid_pairs: 200,
            test_pairs: 200,
            safe_fraction: 0.3,
            rare_fraction: 0.5,
            rare_weight: 0.05,
        }
    }
}

const KINDS: &[&str] = &["singer", "city", "river", "painter", "dish", "game", "island", "festival"];
const OPENERS: &[&str] = &["hello !", "hi there , how are you ?", "good morning .", "nice to meet you ."];
const ASKS: &[&str] = &[
    "what do you know about {t} ?",
    "tell me about {t} .",
    "have you heard of {t} ?",
    "i was reading about {t} today .",
    "do you like {t} ?",
];
// Facts appear in knowledge order, so each informative reply is as likely
// as it can be under the gold distribution.
const INFORMS: &[&str] = &[
    "{t} is a {k} famous for {f} , {g} and {h} .",
    "yes , {t} is a {k} famous for {f} .",
    "i know {t} is famous for {g} and {h} .",
];
const SAFE: &[&str] = &["i don't know .", "i'm not sure .", "i'm not sure , sorry ."];

pub struct Entity {
    pub title: String,
    pub kind: String,
    pub facts: Vec<String>,
    pub knowledge_id: usize,
    /// Drawn at `rare_weight` in the training dialogs.
    pub rare: bool,
}

/// Knowledge-grounded chit-chat: each utterance names one entity, and
/// informative gold responses repeat facts from that entity's knowledge
/// sentence. Rare entities barely occur in training, so their facts are
/// mostly available through the knowledge base alone.
pub struct DialogFixture {
    pub articles: Vec<Article>,
    pub kb: KnowledgeBase,
    pub entities: Vec<Entity>,
    pub train: Vec<DialogExample>,
    pub valid: Vec<DialogExample>,
    pub test: Vec<DialogExample>,
}

fn fill(template: &str, e: &Entity) -> String {
    let fact = |i: usize| e.facts[i % e.facts.len()].as_str();
    template
        .replace("{t}", &e.title)
        .replace("{k}", &e.kind)
        .replace("{f}", fact(0))
        .replace("{g}", fact(1))
        .replace("{h}", fact(2))
}

fn pick_weighted(weights: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.uniform() as f64 * total;
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn dialog_pair(e: &Entity, cfg: &DialogFixtureConfig, kb: &KnowledgeBase, rng: &mut Rng) -> DialogExample {
    let utterance = fill(ASKS[rng.below(ASKS.len())], e);
    let response = if (rng.uniform() as f64) < cfg.safe_fraction {
        SAFE[rng.below(SAFE.len())].to_string()
    } else {
        fill(INFORMS[rng.below(INFORMS.len())], e)
    };
    let context = if rng.below(4) == 0 {
        vec![OPENERS[rng.below(OPENERS.len())].to_string()]
    } else {
        Vec::new()
    };
    DialogExample {
        context,
        utterance,
        response,
        knowledge: Some(kb.items()[e.knowledge_id].text.clone()),
    }
}

pub fn dialog_fixture(cfg: &DialogFixtureConfig, seed: u64) -> Result<DialogFixture> {
    let shares_ok = (0.0..=1.0).contains(&cfg.safe_fraction) && (0.0..=1.0).contains(&cfg.rare_fraction);
    if cfg.entities < 2 || cfg.facts_per_entity == 0 || !shares_ok || !(cfg.rare_weight > 0.0) {
        return Err(Error::Config(
            "fixture needs >= 2 entities, >= 1 fact, shares in [0, 1] and a positive rare weight".into(),
        ));
    }
    let root = Rng::new(seed);
    let reserved: Vec<&str> = KINDS.to_vec();
    let mut forge = WordForge::new(root.fork("words"), &reserved);
    let mut rng = root.fork("entities");
    let n_rare = (cfg.entities as f64 * cfg.rare_fraction).round() as usize;
    let mut entities = Vec::new();
    let mut articles = Vec::new();
    for i in 0..cfg.entities {
        let title = forge.word();
        let facts: Vec<String> = (0..cfg.facts_per_entity).map(|_| forge.word()).collect();
        let kind = KINDS[rng.below(KINDS.len())].to_string();
        let listed = match facts.len() {
            1 => facts[0].clone(),
            n => format!("{} and {}", facts[..n - 1].join(", "), facts[n - 1]),
        };
        articles.push(Article {
            title: capitalize(&title),
            text: format!(
                "{} is a {kind} famous for {listed}. Many people talk about it every year.",
                capitalize(&title)
            ),
        });
        entities.push(Entity {
            title,
            kind,
            facts,
            knowledge_id: i,
            rare: i >= cfg.entities - n_rare,
        });
    }
    let kb = kb_from(&articles)?;
    let skewed: Vec<f64> = entities.iter().map(|e| if e.rare { cfg.rare_weight } else { 1.0 }).collect();
    let uniform = vec![1.0; entities.len()];
    let mut rng = root.fork("dialogs");
    let mut draw = |n: usize, weights: &[f64]| {
        (0..n)
            .map(|_| {
                let e = &entities[pick_weighted(weights, &mut rng)];
                dialog_pair(e, cfg, &kb, &mut rng)
            })
            .collect::<Vec<_>>()
    };
    let train = draw(cfg.train_pairs, &skewed);
    let valid = draw(cfg.valid_pairs, &skewed);
    let test = draw(cfg.test_pairs, &uniform);
    Ok(DialogFixture {
        articles,
        kb,
        entities,
        train,
        valid,
        test,
    })
}

impl DialogFixture {
    /// Writes `articles.jsonl`, `train.jsonl`, `valid.jsonl` and `test.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut articles = String::new();
        for a in &self.articles {
            articles.push_str(&serde_json::to_string(a).map_err(|e| Error::Config(e.to_string()))?);
            articles.push('\n');
        }
        std::fs::write(dir.join("articles.jsonl"), articles)?;
        for (name, set) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            std::fs::write(dir.join(format!("{name}.jsonl")), dialog_corpus_to_jsonl(set))?;
        }
        Ok(())
    }
}
