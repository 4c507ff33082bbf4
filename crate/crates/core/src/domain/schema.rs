use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dialogue::{ActionKind, END_DIALOGUE, WAIT_FOR_USER_INPUT};
use super::tokenize::normalize;

pub const SCHEMA_VERSION: u32 = 1;

pub const REQUEST_PREFERENCE: &str = "request_preference";
pub const REQUEST_MORE: &str = "request_more";
pub const GOODBYE: &str = "goodbye";
pub const NOTIFY_CANCELLED: &str = "notify_cancelled";
pub const CLARIFY_GENERIC: &str = "clarify_generic";

const FIXED_NLG: [&str; 5] = [REQUEST_PREFERENCE, REQUEST_MORE, GOODBYE, NOTIFY_CANCELLED, CLARIFY_GENERIC];

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("cannot read schema {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("dangling reference in {location}: `{reference}` is not declared")]
    Dangling { location: String, reference: String },
    #[error("duplicate {0}")]
    Duplicate(String),
    #[error("invalid schema: {0}")]
    Invalid(String),
}

impl From<serde_json::Error> for SchemaError {
    fn from(e: serde_json::Error) -> Self {
        SchemaError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArgumentSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub arg_type: String,
    #[serde(default = "yes")]
    pub required: bool,
}

fn yes() -> bool {
    true
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Like,
    Dislike,
    Conditional,
}

/// How an API maps onto the preference store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum KbEffect {
    Upsert {
        domain: String,
        entity_type: String,
        value_arg: String,
        polarity: Polarity,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition_arg: Option<String>,
    },
    Delete {
        domain: String,
        entity_type: String,
        value_arg: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition_arg: Option<String>,
    },
    Retrieve {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        domain: Option<String>,
    },
    DeleteAll,
}

impl KbEffect {
    pub fn is_destructive(&self) -> bool {
        matches!(self, KbEffect::Delete { .. } | KbEffect::DeleteAll)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSpec {
    pub name: String,
    pub domain: String,
    #[serde(default)]
    pub arguments: Vec<ArgumentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub produces: Option<String>,
    pub effect: KbEffect,
    /// Argument that must carry a seeker confirmation before execution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confirmation_arg: Option<String>,
    /// API the provider runs first to show what is about to change.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preamble: Option<String>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub fails_when_empty: bool,
    /// API the provider offers to run when this one comes back empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub setup_api: Option<String>,
}

impl ApiSpec {
    /// Prefix used for result handles, e.g. `getAllAffinityAction` -> `getAllAffinity`.
    pub fn stem(&self) -> &str {
        self.name.strip_suffix("Action").unwrap_or(&self.name)
    }

    pub fn result_arg(&self) -> String {
        format!("{}Result", self.stem())
    }

    pub fn requires_confirmation(&self) -> bool {
        self.confirmation_arg.is_some()
    }

    /// Arguments the seeker supplies, excluding the confirmation.
    pub fn seeker_arguments<'a>(&'a self, schema: &'a DomainSchema) -> impl Iterator<Item = &'a ArgumentSpec> + 'a {
        self.arguments.iter().filter(move |a| {
            schema.is_entity_type(&a.arg_type) && Some(&a.name) != self.confirmation_arg.as_ref()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSignature {
    pub name: String,
    pub kind: ActionKind,
    pub arguments: Vec<ArgumentSpec>,
    pub produces: Option<String>,
}

impl ActionSignature {
    pub fn argument(&self, name: &str) -> Option<&ArgumentSpec> {
        self.arguments.iter().find(|a| a.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub entity_type: String,
    pub values: Vec<String>,
}

impl Catalog {
    pub fn contains(&self, value: &str) -> bool {
        let needle = normalize(value);
        self.values.iter().any(|v| normalize(v) == needle)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderTemplate {
    pub act: String,
    pub text: String,
    /// Question form, used when the agent hands the turn back right after.
    #[serde(default, skip_serializing_if = "is_false")]
    pub ask: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeekerTemplate {
    pub act: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTurn {
    /// Seeker text with inline entity markup: `add the [warriors](sport_team)`.
    pub user: String,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedDialogue {
    pub id: String,
    pub turns: Vec<SeedTurn>,
}

/// Seeker dialogue acts understood by the simulator.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SeekerAct {
    Inform(String),
    Request(String),
    Provide(String),
    Affirm,
    OpenSession,
    CloseSession,
    Decline,
}

impl SeekerAct {
    pub fn parse(key: &str) -> Option<SeekerAct> {
        match key.split_once(':') {
            Some(("inform", api)) => Some(SeekerAct::Inform(api.to_string())),
            Some(("request", api)) => Some(SeekerAct::Request(api.to_string())),
            Some(("provide", ty)) => Some(SeekerAct::Provide(ty.to_string())),
            None => match key {
                "affirm" => Some(SeekerAct::Affirm),
                "open_session" => Some(SeekerAct::OpenSession),
                "close_session" => Some(SeekerAct::CloseSession),
                "decline" => Some(SeekerAct::Decline),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn key(&self) -> String {
        match self {
            SeekerAct::Inform(a) => format!("inform:{a}"),
            SeekerAct::Request(a) => format!("request:{a}"),
            SeekerAct::Provide(t) => format!("provide:{t}"),
            SeekerAct::Affirm => "affirm".into(),
            SeekerAct::OpenSession => "open_session".into(),
            SeekerAct::CloseSession => "close_session".into(),
            SeekerAct::Decline => "decline".into(),
        }
    }
}

/// Slot names (`{name}`) appearing in a template, in order.
pub fn template_slots(text: &str) -> Vec<String> {
    let mut slots = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        match rest[open..].find('}') {
            Some(close) => {
                slots.push(rest[open + 1..open + close].to_string());
                rest = &rest[open + close + 1..];
            }
            None => break,
        }
    }
    slots
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSchema {
    pub version: u32,
    pub name: String,
    pub domains: Vec<String>,
    pub entity_types: Vec<String>,
    pub apis: Vec<ApiSpec>,
    pub catalogs: Vec<Catalog>,
    #[serde(default)]
    pub provider_templates: Vec<ProviderTemplate>,
    #[serde(default)]
    pub seeker_templates: Vec<SeekerTemplate>,
    #[serde(default)]
    pub seeds: Vec<SeedDialogue>,
}

const DEFAULT_SCHEMA: &str = include_str!("../../data/default_schema.json");

pub fn load_schema(path: impl AsRef<Path>) -> Result<DomainSchema, SchemaError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| SchemaError::Io { path: path.display().to_string(), source })?;
    DomainSchema::from_json(&text)
}

impl DomainSchema {
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let schema: DomainSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    /// The bundled preference-teaching schema (sports, restaurant,
    /// preference management, weather provider).
    pub fn default_schema() -> Self {
        Self::from_json(DEFAULT_SCHEMA).expect("bundled schema is valid")
    }

    pub fn default_schema_json() -> &'static str {
        DEFAULT_SCHEMA
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn api(&self, name: &str) -> Option<&ApiSpec> {
        self.apis.iter().find(|a| a.name == name)
    }

    pub fn is_entity_type(&self, ty: &str) -> bool {
        self.entity_types.iter().any(|t| t == ty)
    }

    pub fn result_types(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.apis.iter().filter_map(|a| a.produces.as_ref()).collect();
        set.into_iter().cloned().collect()
    }

    pub fn is_result_type(&self, ty: &str) -> bool {
        self.apis.iter().any(|a| a.produces.as_deref() == Some(ty))
    }

    pub fn catalog(&self, entity_type: &str) -> Option<&Catalog> {
        self.catalogs.iter().find(|c| c.entity_type == entity_type)
    }

    /// Entity type used for seeker confirmations, if any API requires one.
    pub fn confirmation_type(&self) -> Option<&str> {
        self.apis.iter().find_map(|api| {
            let arg = api.confirmation_arg.as_ref()?;
            api.arguments.iter().find(|a| &a.name == arg).map(|a| a.arg_type.as_str())
        })
    }

    /// Every action the provider can take: APIs, derived NLG acts, SYS.
    pub fn signatures(&self) -> Vec<ActionSignature> {
        let mut out: Vec<ActionSignature> = self
            .apis
            .iter()
            .map(|a| ActionSignature {
                name: a.name.clone(),
                kind: ActionKind::Api,
                arguments: a.arguments.clone(),
                produces: a.produces.clone(),
            })
            .collect();
        let nlg = |name: String, arguments: Vec<ArgumentSpec>| ActionSignature {
            name,
            kind: ActionKind::Nlg,
            arguments,
            produces: None,
        };
        for api in &self.apis {
            let result_args: Vec<ArgumentSpec> = api
                .produces
                .iter()
                .map(|ty| ArgumentSpec { name: api.result_arg(), arg_type: ty.clone(), required: true })
                .collect();
            out.push(nlg(format!("notify_{}_success", api.name), result_args.clone()));
            if api.fails_when_empty {
                out.push(nlg(format!("notify_{}_failure", api.name), result_args));
            }
            for arg in api.seeker_arguments(self) {
                out.push(nlg(format!("request_{}_{}", api.name, arg.name), Vec::new()));
            }
            if api.requires_confirmation() && api.preamble.is_none() {
                out.push(nlg(format!("request_confirmation_{}", api.name), api.seeker_arguments(self).cloned().collect()));
            }
        }
        for name in FIXED_NLG {
            out.push(nlg(name.to_string(), Vec::new()));
        }
        for name in [WAIT_FOR_USER_INPUT, END_DIALOGUE] {
            out.push(ActionSignature { name: name.to_string(), kind: ActionKind::Sys, arguments: Vec::new(), produces: None });
        }
        out
    }

    pub fn signature(&self, name: &str) -> Option<ActionSignature> {
        self.signatures().into_iter().find(|s| s.name == name)
    }

    pub fn action_kind(&self, name: &str) -> Option<ActionKind> {
        if self.api(name).is_some() {
            Some(ActionKind::Api)
        } else if name == WAIT_FOR_USER_INPUT || name == END_DIALOGUE {
            Some(ActionKind::Sys)
        } else {
            self.signature(name).map(|s| s.kind)
        }
    }

    /// Stable digest of everything a trained model depends on: entity
    /// types and action signatures. Templates, catalogs and seeds are
    /// excluded so catalogs can grow without retraining.
    pub fn fingerprint(&self) -> String {
        let payload = serde_json::to_vec(&(&self.entity_types, self.signatures())).expect("serializable");
        hex::encode(Sha256::digest(&payload))[..16].to_string()
    }

    pub fn seeker_templates_for(&self, act: &SeekerAct) -> Vec<&SeekerTemplate> {
        let key = act.key();
        self.seeker_templates.iter().filter(|t| t.act == key).collect()
    }

    pub fn validate(&self) -> Result<(), SchemaError> {
        if self.version != SCHEMA_VERSION {
            return Err(SchemaError::Invalid(format!("unsupported schema version {}", self.version)));
        }
        let dangling = |location: String, reference: &str| SchemaError::Dangling { location, reference: reference.to_string() };

        unique(self.entity_types.iter(), "entity type")?;
        unique(self.apis.iter().map(|a| &a.name), "api")?;
        unique(self.catalogs.iter().map(|c| &c.entity_type), "catalog")?;

        for cat in &self.catalogs {
            if !self.is_entity_type(&cat.entity_type) {
                return Err(dangling(format!("catalog {}", cat.entity_type), &cat.entity_type));
            }
            if cat.values.is_empty() || cat.values.iter().any(|v| normalize(v).is_empty()) {
                return Err(SchemaError::Invalid(format!("catalog {} has empty values", cat.entity_type)));
            }
        }
        for ty in &self.entity_types {
            if self.catalog(ty).is_none() {
                return Err(SchemaError::Invalid(format!("entity type {ty} has no catalog")));
            }
        }

        for api in &self.apis {
            let loc = |what: &str| format!("api {} {what}", api.name);
            if !self.domains.contains(&api.domain) {
                return Err(dangling(loc("domain"), &api.domain));
            }
            unique(api.arguments.iter().map(|a| &a.name), &format!("argument in {}", api.name))?;
            for arg in &api.arguments {
                if !self.is_entity_type(&arg.arg_type) && !self.is_result_type(&arg.arg_type) {
                    return Err(dangling(loc(&format!("argument {}", arg.name)), &arg.arg_type));
                }
            }
            if self.is_entity_type(api.produces.as_deref().unwrap_or("")) {
                return Err(SchemaError::Invalid(format!("api {} produces an entity type", api.name)));
            }
            let has_arg = |name: &str| api.arguments.iter().any(|a| a.name == name);
            if let Some(c) = &api.confirmation_arg {
                if !has_arg(c) {
                    return Err(dangling(loc("confirmation_arg"), c));
                }
            }
            for (what, target) in [("preamble", &api.preamble), ("setup_api", &api.setup_api)] {
                if let Some(t) = target {
                    if self.api(t).is_none() {
                        return Err(dangling(loc(what), t));
                    }
                }
            }
            match &api.effect {
                KbEffect::Upsert { domain, entity_type, value_arg, condition_arg, .. }
                | KbEffect::Delete { domain, entity_type, value_arg, condition_arg } => {
                    if !self.domains.contains(domain) {
                        return Err(dangling(loc("effect domain"), domain));
                    }
                    if !self.is_entity_type(entity_type) {
                        return Err(dangling(loc("effect entity_type"), entity_type));
                    }
                    if !has_arg(value_arg) {
                        return Err(dangling(loc("effect value_arg"), value_arg));
                    }
                    if let Some(c) = condition_arg {
                        if !has_arg(c) {
                            return Err(dangling(loc("effect condition_arg"), c));
                        }
                    }
                }
                KbEffect::Retrieve { domain: Some(d) } => {
                    if !self.domains.contains(d) {
                        return Err(dangling(loc("effect domain"), d));
                    }
                }
                KbEffect::Retrieve { domain: None } | KbEffect::DeleteAll => {}
            }
            if api.effect.is_destructive() && !api.requires_confirmation() {
                return Err(SchemaError::Invalid(format!("destructive api {} needs a confirmation_arg", api.name)));
            }
        }

        let signatures = self.signatures();
        unique(signatures.iter().map(|s| &s.name), "action name")?;
        let nlg_names: BTreeSet<&str> =
            signatures.iter().filter(|s| s.kind == ActionKind::Nlg).map(|s| s.name.as_str()).collect();
        for t in &self.provider_templates {
            let Some(sig) = signatures.iter().find(|s| s.name == t.act && s.kind == ActionKind::Nlg) else {
                return Err(dangling(format!("provider template `{}`", t.text), &t.act));
            };
            for slot in template_slots(&t.text) {
                let from_result = sig.arguments.iter().any(|a| self.is_result_type(&a.arg_type))
                    && RESULT_SLOTS.contains(&slot.as_str());
                if !from_result && sig.argument(&slot).is_none() {
                    return Err(dangling(format!("provider template `{}` slot", t.text), &slot));
                }
            }
        }
        for name in &nlg_names {
            if !self.provider_templates.iter().any(|t| t.act == *name) {
                return Err(SchemaError::Invalid(format!("no provider template for {name}")));
            }
        }

        for t in &self.seeker_templates {
            self.validate_seeker_template(t)?;
        }

        let action_names: BTreeSet<&str> = signatures.iter().map(|s| s.name.as_str()).collect();
        for seed in &self.seeds {
            for turn in &seed.turns {
                let (_, marks) = parse_markup(&turn.user)
                    .map_err(|m| SchemaError::Invalid(format!("seed {}: {m}", seed.id)))?;
                for (_, ty) in marks {
                    if !self.is_entity_type(&ty) {
                        return Err(dangling(format!("seed {}", seed.id), &ty));
                    }
                }
                for a in &turn.actions {
                    let (name, _) =
                        parse_seed_action(a).map_err(|m| SchemaError::Invalid(format!("seed {}: {m}", seed.id)))?;
                    if !action_names.contains(name.as_str()) {
                        return Err(dangling(format!("seed {}", seed.id), &name));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_seeker_template(&self, t: &SeekerTemplate) -> Result<(), SchemaError> {
        let location = format!("seeker template `{}`", t.text);
        let act = SeekerAct::parse(&t.act).ok_or_else(|| SchemaError::Dangling {
            location: location.clone(),
            reference: t.act.clone(),
        })?;
        let mut slots = template_slots(&t.text);
        slots.sort();
        let mut expected: Vec<String> = match &act {
            SeekerAct::Inform(api) | SeekerAct::Request(api) => {
                let spec = self.api(api).ok_or_else(|| SchemaError::Dangling {
                    location: location.clone(),
                    reference: api.clone(),
                })?;
                if matches!(act, SeekerAct::Inform(_)) {
                    spec.seeker_arguments(self).map(|a| a.arg_type.clone()).collect()
                } else {
                    Vec::new()
                }
            }
            SeekerAct::Provide(ty) => {
                if !self.is_entity_type(ty) {
                    return Err(SchemaError::Dangling { location, reference: ty.clone() });
                }
                vec![ty.clone()]
            }
            SeekerAct::Affirm => self.confirmation_type().map(str::to_string).into_iter().collect(),
            _ => Vec::new(),
        };
        expected.sort();
        if slots != expected {
            return Err(SchemaError::Invalid(format!("{location}: slots {slots:?}, expected {expected:?}")));
        }
        for slot in template_slots(&t.text) {
            let marker = format!("{{{slot}}}");
            let at = t.text.find(&marker).unwrap_or(0);
            let before = t.text[..at].chars().last();
            let after = t.text[at + marker.len()..].chars().next();
            let boundary = |c: Option<char>| c.is_none_or(|c| !c.is_alphanumeric());
            if !boundary(before) || !boundary(after) {
                return Err(SchemaError::Invalid(format!("{location}: slot {slot} is glued to a word")));
            }
        }
        Ok(())
    }

    /// Map from entity type to its normalized catalog values.
    pub fn catalog_index(&self) -> BTreeMap<String, Vec<String>> {
        self.catalogs
            .iter()
            .map(|c| (c.entity_type.clone(), c.values.iter().map(|v| normalize(v)).collect()))
            .collect()
    }
}

/// Slots a provider template may use when its act consumes an API result.
pub const RESULT_SLOTS: [&str; 4] = ["value", "condition", "count", "preferences"];

fn unique<'a>(items: impl Iterator<Item = &'a String>, what: &str) -> Result<(), SchemaError> {
    let mut seen = BTreeSet::new();
    for item in items {
        if !seen.insert(item) {
            return Err(SchemaError::Duplicate(format!("{what} `{item}`")));
        }
    }
    Ok(())
}

/// Splits `a [b c](ty) d` into plain and typed segments.
pub fn markup_segments(markup: &str) -> Result<Vec<(String, Option<String>)>, String> {
    let mut segments = Vec::new();
    let mut rest = markup;
    while let Some(open) = rest.find('[') {
        if open > 0 {
            segments.push((rest[..open].to_string(), None));
        }
        let after = &rest[open + 1..];
        let close = after.find("](").ok_or_else(|| format!("unterminated entity markup in `{markup}`"))?;
        let tail = &after[close + 2..];
        let end = tail.find(')').ok_or_else(|| format!("unterminated entity type in `{markup}`"))?;
        segments.push((after[..close].to_string(), Some(tail[..end].to_string())));
        rest = &tail[end + 1..];
    }
    if !rest.is_empty() {
        segments.push((rest.to_string(), None));
    }
    Ok(segments)
}

/// Plain text plus (surface, type) marks of a markup string.
pub fn parse_markup(markup: &str) -> Result<(String, Vec<(String, String)>), String> {
    let segments = markup_segments(markup)?;
    let text = segments.iter().map(|(s, _)| s.as_str()).collect();
    let marks = segments.into_iter().filter_map(|(s, t)| t.map(|t| (s, t))).collect();
    Ok((text, marks))
}

/// Splits a seed action such as `setSportAffinity(team=#1)` into its name
/// and explicit mention indices.
pub fn parse_seed_action(action: &str) -> Result<(String, Vec<(String, usize)>), String> {
    let Some(open) = action.find('(') else {
        return Ok((action.trim().to_string(), Vec::new()));
    };
    let inner = action[open + 1..].strip_suffix(')').ok_or_else(|| format!("malformed seed action `{action}`"))?;
    let mut explicit = Vec::new();
    for part in inner.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (arg, idx) = part.split_once("=#").ok_or_else(|| format!("malformed binding `{part}`"))?;
        let idx = idx.trim().parse().map_err(|_| format!("malformed binding `{part}`"))?;
        explicit.push((arg.trim().to_string(), idx));
    }
    Ok((action[..open].trim().to_string(), explicit))
}
