//! Sentiment tuples, tasks, and the mapping between dataset labels and the
//! natural-language phrases that appear in generated sequences.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dataset-space surface of an implicit aspect term.
pub const DATASET_NULL: &str = "NULL";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchemaError {
    #[error("unknown category `{0}`")]
    UnknownCategory(String),
    #[error("unknown category phrase `{0}`")]
    UnknownCategoryPhrase(String),
    #[error("unknown polarity phrase `{0}`")]
    UnknownPolarityPhrase(String),
    #[error("unknown polarity label `{0}`")]
    UnknownPolarity(String),
    #[error("invalid category `{0}`: expected uppercase ENTITY#ATTRIBUTE")]
    InvalidCategory(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("task {task} requires the {element} element")]
    MissingElement { task: Task, element: Element },
    #[error("schema strings are not pairwise distinct: `{0}` appears twice")]
    DuplicateString(String),
    #[error("schema has no categories")]
    NoCategories,
    #[error("schema string for {0} is empty")]
    EmptyString(String),
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("cannot read schema config: {0}")]
    Io(String),
}

/// Collapse whitespace runs to single spaces and trim the ends.
pub fn normalize_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Neutral,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

    pub fn label(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
            Polarity::Neutral => "neutral",
        }
    }
}

impl FromStr for Polarity {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" => Ok(Polarity::Positive),
            "negative" | "neg" => Ok(Polarity::Negative),
            "neutral" | "neu" => Ok(Polarity::Neutral),
            _ => Err(SchemaError::UnknownPolarity(s.to_string())),
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// An aspect category such as `FOOD#QUALITY` together with its generated
/// phrase `food quality`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Category {
    raw: String,
    phrase: String,
}

impl Category {
    pub fn new(raw: &str) -> Result<Self, SchemaError> {
        let raw = raw.trim();
        let valid = raw.matches('#').count() == 1
            && !raw.starts_with('#')
            && !raw.ends_with('#')
            && raw == raw.to_uppercase()
            && !raw.chars().any(char::is_whitespace);
        if !valid {
            return Err(SchemaError::InvalidCategory(raw.to_string()));
        }
        let phrase = raw.to_lowercase().replace('#', " ");
        Ok(Category {
            raw: raw.to_string(),
            phrase,
        })
    }

    pub fn raw(&self) -> &str {
        &self.raw
    }

    pub fn phrase(&self) -> &str {
        &self.phrase
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

impl Serialize for Category {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.raw)
    }
}

impl<'de> Deserialize<'de> for Category {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Category::new(&raw).map_err(serde::de::Error::custom)
    }
}

/// Aspect term in dataset space. Implicit aspects carry the surface `NULL`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AspectTerm {
    surface: String,
}

impl AspectTerm {
    pub fn new(surface: &str) -> Self {
        AspectTerm {
            surface: normalize_ws(surface),
        }
    }

    pub fn null() -> Self {
        AspectTerm {
            surface: DATASET_NULL.to_string(),
        }
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn is_null(&self) -> bool {
        self.surface == DATASET_NULL
    }
}

impl Serialize for AspectTerm {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.surface)
    }
}

impl<'de> Deserialize<'de> for AspectTerm {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(AspectTerm::new(&String::deserialize(d)?))
    }
}

/// One opinion. Elements outside a task's subset are `None`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SentimentTuple {
    pub aspect: AspectTerm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Polarity>,
}

impl SentimentTuple {
    pub fn new(aspect: AspectTerm, category: Option<Category>, polarity: Option<Polarity>) -> Self {
        SentimentTuple {
            aspect,
            category,
            polarity,
        }
    }

    /// Full (a, c, p) triplet.
    pub fn triplet(aspect: &str, category: &str, polarity: Polarity) -> Result<Self, SchemaError> {
        Ok(SentimentTuple {
            aspect: AspectTerm::new(aspect),
            category: Some(Category::new(category)?),
            polarity: Some(polarity),
        })
    }

    /// Drop the elements the task does not predict.
    pub fn project(&self, task: Task) -> SentimentTuple {
        SentimentTuple {
            aspect: self.aspect.clone(),
            category: if task.has(Element::Category) {
                self.category.clone()
            } else {
                None
            },
            polarity: if task.has(Element::Polarity) {
                self.polarity
            } else {
                None
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Element {
    Aspect,
    Category,
    Polarity,
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Element::Aspect => "aspect",
            Element::Category => "category",
            Element::Polarity => "polarity",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// (aspect, polarity) pairs.
    #[serde(rename = "e2e")]
    E2eAbsa,
    /// (aspect, category) pairs.
    Acte,
    /// (aspect, category, polarity) triplets.
    Tasd,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::E2eAbsa, Task::Acte, Task::Tasd];

    /// Elements in priority order (aspect before category before polarity).
    pub fn elements(self) -> &'static [Element] {
        match self {
            Task::E2eAbsa => &[Element::Aspect, Element::Polarity],
            Task::Acte => &[Element::Aspect, Element::Category],
            Task::Tasd => &[Element::Aspect, Element::Category, Element::Polarity],
        }
    }

    pub fn has(self, element: Element) -> bool {
        self.elements().contains(&element)
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::E2eAbsa => "e2e",
            Task::Acte => "acte",
            Task::Tasd => "tasd",
        }
    }
}

impl FromStr for Task {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "e2e" | "e2eabsa" => Ok(Task::E2eAbsa),
            "acte" => Ok(Task::Acte),
            "tasd" => Ok(Task::Tasd),
            _ => Err(SchemaError::UnknownTask(s.to_string())),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Generation-space view of a tuple: the phrases placed after each marker.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PhraseTuple {
    pub aspect: String,
    pub category: Option<String>,
    pub polarity: Option<String>,
}

impl PhraseTuple {
    pub fn get(&self, element: Element) -> Option<&str> {
        match element {
            Element::Aspect => Some(&self.aspect),
            Element::Category => self.category.as_deref(),
            Element::Polarity => self.polarity.as_deref(),
        }
    }
}

/// The 12 SemEval-2016 restaurant categories.
pub const RESTAURANT_CATEGORIES: [&str; 12] = [
    "AMBIENCE#GENERAL",
    "DRINKS#PRICES",
    "DRINKS#QUALITY",
    "DRINKS#STYLE_OPTIONS",
    "FOOD#PRICES",
    "FOOD#QUALITY",
    "FOOD#STYLE_OPTIONS",
    "LOCATION#GENERAL",
    "RESTAURANT#GENERAL",
    "RESTAURANT#MISCELLANEOUS",
    "RESTAURANT#PRICES",
    "SERVICE#GENERAL",
];

/// Marker strings, phrase maps and the closed category vocabulary.
///
/// Construct through [`SchemaConfig::new`] or [`SchemaConfig::parse`], both of
/// which validate that every surface string is distinct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaConfig {
    aspect_marker: String,
    category_marker: String,
    polarity_marker: String,
    separator: String,
    null_phrase: String,
    positive: String,
    negative: String,
    neutral: String,
    categories: Vec<Category>,
}

impl SchemaConfig {
    /// Default markers and phrases over the given categories.
    pub fn new<S: AsRef<str>>(categories: &[S]) -> Result<Self, SchemaError> {
        let categories = categories
            .iter()
            .map(|c| Category::new(c.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = SchemaConfig {
            aspect_marker: "[A]".into(),
            category_marker: "[C]".into(),
            polarity_marker: "[P]".into(),
            separator: "[;]".into(),
            null_phrase: "it".into(),
            positive: "great".into(),
            negative: "bad".into(),
            neutral: "ok".into(),
            categories,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn restaurants() -> Self {
        SchemaConfig::new(&RESTAURANT_CATEGORIES).expect("built-in schema is valid")
    }

    fn validate(&self) -> Result<(), SchemaError> {
        if self.categories.is_empty() {
            return Err(SchemaError::NoCategories);
        }
        let mut seen = HashSet::new();
        let named = [
            ("aspect marker", &self.aspect_marker),
            ("category marker", &self.category_marker),
            ("polarity marker", &self.polarity_marker),
            ("separator", &self.separator),
            ("null phrase", &self.null_phrase),
            ("positive phrase", &self.positive),
            ("negative phrase", &self.negative),
            ("neutral phrase", &self.neutral),
        ];
        for (name, s) in named {
            if s.trim().is_empty() {
                return Err(SchemaError::EmptyString(name.to_string()));
            }
            if !seen.insert(s.as_str()) {
                return Err(SchemaError::DuplicateString(s.clone()));
            }
        }
        for c in &self.categories {
            if !seen.insert(c.phrase()) {
                return Err(SchemaError::DuplicateString(c.phrase().to_string()));
            }
        }
        Ok(())
    }

    pub fn marker(&self, element: Element) -> &str {
        match element {
            Element::Aspect => &self.aspect_marker,
            Element::Category => &self.category_marker,
            Element::Polarity => &self.polarity_marker,
        }
    }

    pub fn separator(&self) -> &str {
        &self.separator
    }

    pub fn null_phrase(&self) -> &str {
        &self.null_phrase
    }

    pub fn polarity_phrase(&self, p: Polarity) -> &str {
        match p {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
            Polarity::Neutral => &self.neutral,
        }
    }

    pub fn polarity_from_phrase(&self, phrase: &str) -> Option<Polarity> {
        Polarity::ALL
            .into_iter()
            .find(|&p| self.polarity_phrase(p) == phrase)
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn category(&self, raw: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.raw() == raw)
    }

    pub fn category_from_phrase(&self, phrase: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.phrase() == phrase)
    }

    /// Every phrase the decoder may emit for the element, in config order.
    pub fn phrases(&self, element: Element) -> Vec<&str> {
        match element {
            Element::Aspect => vec![self.null_phrase.as_str()],
            Element::Category => self.categories.iter().map(Category::phrase).collect(),
            Element::Polarity => Polarity::ALL
                .iter()
                .map(|&p| self.polarity_phrase(p))
                .collect(),
        }
    }

    /// Map a dataset-space tuple to the phrases used in generated text.
    pub fn to_generation_space(&self, t: &SentimentTuple) -> Result<PhraseTuple, SchemaError> {
        let aspect = if t.aspect.is_null() {
            self.null_phrase.clone()
        } else {
            t.aspect.surface().to_string()
        };
        let category = match &t.category {
            Some(c) => Some(
                self.category(c.raw())
                    .ok_or_else(|| SchemaError::UnknownCategory(c.raw().to_string()))?
                    .phrase()
                    .to_string(),
            ),
            None => None,
        };
        let polarity = t.polarity.map(|p| self.polarity_phrase(p).to_string());
        Ok(PhraseTuple {
            aspect,
            category,
            polarity,
        })
    }

    /// Inverse of [`to_generation_space`](Self::to_generation_space). The
    /// aspect phrase is accepted as-is; the null phrase maps back to `NULL`.
    pub fn from_generation_space(
        &self,
        phrases: &PhraseTuple,
        task: Task,
    ) -> Result<SentimentTuple, SchemaError> {
        let aspect_text = normalize_ws(&phrases.aspect);
        let aspect = if aspect_text == self.null_phrase {
            AspectTerm::null()
        } else {
            AspectTerm::new(&aspect_text)
        };
        let category = if task.has(Element::Category) {
            let phrase = phrases.category.as_deref().ok_or(SchemaError::MissingElement {
                task,
                element: Element::Category,
            })?;
            let phrase = normalize_ws(phrase);
            Some(
                self.category_from_phrase(&phrase)
                    .ok_or(SchemaError::UnknownCategoryPhrase(phrase))?
                    .clone(),
            )
        } else {
            None
        };
        let polarity = if task.has(Element::Polarity) {
            let phrase = phrases.polarity.as_deref().ok_or(SchemaError::MissingElement {
                task,
                element: Element::Polarity,
            })?;
            let phrase = normalize_ws(phrase);
            Some(
                self.polarity_from_phrase(&phrase)
                    .ok_or(SchemaError::UnknownPolarityPhrase(phrase))?,
            )
        } else {
            None
        };
        Ok(SentimentTuple {
            aspect,
            category,
            polarity,
        })
    }

    /// Parse the `key = value` config format.
    ///
    /// ```text
    /// # comment
    /// marker.aspect = [A]
    /// marker.category = [C]
    /// marker.polarity = [P]
    /// separator = [;]
    /// null_phrase = it
    /// polarity.positive = great
    /// polarity.negative = bad
    /// polarity.neutral = ok
    /// category = FOOD#QUALITY
    /// category = SERVICE#GENERAL
    /// ```
    ///
    /// Omitted scalar keys keep their defaults; `category` is repeatable and
    /// at least one is required.
    pub fn parse(text: &str) -> Result<Self, SchemaError> {
        let mut scalars: BTreeMap<&str, String> = BTreeMap::new();
        let mut categories = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SchemaError::Config {
                line: lineno,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim().to_string();
            match key {
                "category" => categories.push(Category::new(&value).map_err(|e| {
                    SchemaError::Config {
                        line: lineno,
                        message: e.to_string(),
                    }
                })?),
                "marker.aspect" | "marker.category" | "marker.polarity" | "separator"
                | "null_phrase" | "polarity.positive" | "polarity.negative"
                | "polarity.neutral" => {
                    if scalars.insert(key, value).is_some() {
                        return Err(SchemaError::Config {
                            line: lineno,
                            message: format!("duplicate key `{key}`"),
                        });
                    }
                }
                other => {
                    return Err(SchemaError::Config {
                        line: lineno,
                        message: format!("unknown key `{other}`"),
                    })
                }
            }
        }
        let mut take = |k: &str, default: &str| scalars.remove(k).unwrap_or_else(|| default.into());
        let cfg = SchemaConfig {
            aspect_marker: take("marker.aspect", "[A]"),
            category_marker: take("marker.category", "[C]"),
            polarity_marker: take("marker.polarity", "[P]"),
            separator: take("separator", "[;]"),
            null_phrase: take("null_phrase", "it"),
            positive: take("polarity.positive", "great"),
            negative: take("polarity.negative", "bad"),
            neutral: take("polarity.neutral", "ok"),
            categories,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SchemaError::Io(format!("{}: {e}", path.display())))?;
        SchemaConfig::parse(&text)
    }

    /// Render in the format accepted by [`parse`](Self::parse).
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("marker.aspect = {}\n", self.aspect_marker));
        out.push_str(&format!("marker.category = {}\n", self.category_marker));
        out.push_str(&format!("marker.polarity = {}\n", self.polarity_marker));
        out.push_str(&format!("separator = {}\n", self.separator));
        out.push_str(&format!("null_phrase = {}\n", self.null_phrase));
        out.push_str(&format!("polarity.positive = {}\n", self.positive));
        out.push_str(&format!("polarity.negative = {}\n", self.negative));
        out.push_str(&format!("polarity.neutral = {}\n", self.neutral));
        for c in &self.categories {
            out.push_str(&format!("category = {}\n", c.raw()));
        }
        out
    }
}
