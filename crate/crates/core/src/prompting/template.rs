use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::artifact;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateRole {
    CaptionSystem,
    CaptionUser,
    PromptgenSystem,
    PromptgenUser,
}

impl TemplateRole {
    pub const ALL: [TemplateRole; 4] = [
        TemplateRole::CaptionSystem,
        TemplateRole::CaptionUser,
        TemplateRole::PromptgenSystem,
        TemplateRole::PromptgenUser,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateRole::CaptionSystem => "caption_system",
            TemplateRole::CaptionUser => "caption_user",
            TemplateRole::PromptgenSystem => "promptgen_system",
            TemplateRole::PromptgenUser => "promptgen_user",
        }
    }
}

impl fmt::Display for TemplateRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placeholder {
    VehicleName,
    ExamplesList,
    Batch,
}

impl Placeholder {
    pub const ALL: [Placeholder; 3] = [
        Placeholder::VehicleName,
        Placeholder::ExamplesList,
        Placeholder::Batch,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Placeholder::VehicleName => "vehicle_name",
            Placeholder::ExamplesList => "examples_list",
            Placeholder::Batch => "batch",
        }
    }

    pub fn from_token(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.token() == token)
    }
}

pub type Bindings = BTreeMap<Placeholder, String>;

/// A prompt body with `{vehicle_name}`, `{examples_list}` and `{batch}`
/// placeholders. Braces that do not enclose an identifier are literal text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub role: TemplateRole,
    body: String,
    placeholders: BTreeSet<Placeholder>,
}

enum Piece<'a> {
    Text(&'a str),
    Token(&'a str),
}

// Splits on `{identifier}` occurrences.
fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let ident_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if ident_len > 0 && after[ident_len..].starts_with('}') {
            out.push(Piece::Text(&rest[..open]));
            out.push(Piece::Token(&after[..ident_len]));
            rest = &after[ident_len + 1..];
        } else {
            out.push(Piece::Text(&rest[..=open]));
            rest = after;
        }
    }
    out.push(Piece::Text(rest));
    out
}

impl PromptTemplate {
    pub fn new(
        name: impl Into<String>,
        body: impl Into<String>,
        role: TemplateRole,
    ) -> Result<Self, PromptError> {
        let name = name.into();
        let body = body.into();
        let mut placeholders = BTreeSet::new();
        for piece in pieces(&body) {
            if let Piece::Token(token) = piece {
                let p = Placeholder::from_token(token).ok_or_else(|| PromptError::UnknownPlaceholder {
                    template: name.clone(),
                    token: token.to_string(),
                })?;
                placeholders.insert(p);
            }
        }
        Ok(Self {
            name,
            role,
            body,
            placeholders,
        })
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn placeholders(&self) -> &BTreeSet<Placeholder> {
        &self.placeholders
    }

    pub fn hash(&self) -> String {
        artifact::sha256_hex(self.body.as_bytes())
    }

    /// Literal single-pass substitution; bound values are not rescanned.
    pub fn render(&self, bindings: &Bindings) -> Result<String, PromptError> {
        render_template(self, bindings)
    }
}

pub fn render_template(template: &PromptTemplate, bindings: &Bindings) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.body.len());
    for piece in pieces(&template.body) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Token(token) => {
                let value = Placeholder::from_token(token)
                    .and_then(|p| bindings.get(&p))
                    .ok_or_else(|| PromptError::UnresolvedPlaceholder {
                        template: template.name.clone(),
                        token: token.to_string(),
                    })?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

/// Caption lines for `{examples_list}`, one `- ` bullet per caption.
pub fn format_examples<S: AsRef<str>>(captions: &[S]) -> String {
    captions
        .iter()
        .map(|c| format!("- {}", c.as_ref().trim()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Version tag of the bundled templates.
pub const BUILTIN_TEMPLATE_VERSION: &str = "1";

const BUILTIN: [(TemplateRole, &str); 4] = [
    (TemplateRole::CaptionSystem, include_str!("../../templates/caption_system.txt")),
    (TemplateRole::CaptionUser, include_str!("../../templates/caption_user.txt")),
    (TemplateRole::PromptgenSystem, include_str!("../../templates/promptgen_system.txt")),
    (TemplateRole::PromptgenUser, include_str!("../../templates/promptgen_user.txt")),
];

/// One template per role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateSet {
    templates: BTreeMap<TemplateRole, PromptTemplate>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    /// The bundled templates, each assigned the role its file name says.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(role, body)| {
                let t = PromptTemplate::new(role.as_str(), *body, *role)
                    .expect("bundled templates use known placeholders");
                (*role, t)
            })
            .collect();
        Self { templates }
    }

    /// Reads `<role>.txt` files from `dir`; roles without a file keep the
    /// bundled template.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for role in TemplateRole::ALL {
            let path = dir.join(format!("{}.txt", role.as_str()));
            if path.exists() {
                let body = fs::read_to_string(&path)
                    .map_err(|e| PromptError::Io(format!("{}: {e}", path.display())))?;
                set.insert(PromptTemplate::new(path.display().to_string(), body, role)?);
            }
        }
        Ok(set)
    }

    /// Reassigns roles: `assignments[role] = source_role` makes `role` use the
    /// body currently held by `source_role`.
    pub fn with_roles(&self, assignments: &BTreeMap<TemplateRole, TemplateRole>) -> Self {
        let mut out = self.clone();
        for (role, source) in assignments {
            let mut t = self.templates[source].clone();
            t.role = *role;
            out.templates.insert(*role, t);
        }
        out
    }

    pub fn insert(&mut self, template: PromptTemplate) {
        self.templates.insert(template.role, template);
    }

    pub fn get(&self, role: TemplateRole) -> &PromptTemplate {
        &self.templates[&role]
    }

    pub fn hash(&self) -> String {
        let bodies: Vec<(&str, &str)> = self
            .templates
            .iter()
            .map(|(r, t)| (r.as_str(), t.body()))
            .collect();
        artifact::json_hash(&bodies)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bind(pairs: &[(Placeholder, &str)]) -> Bindings {
        pairs.iter().map(|(p, v)| (*p, v.to_string())).collect()
    }

    #[test]
    fn caption_template_names_the_vehicle() {
        let set = TemplateSet::builtin();
        let t = set.get(TemplateRole::CaptionSystem);
        assert_eq!(t.placeholders().iter().copied().collect::<Vec<_>>(), vec![Placeholder::VehicleName]);
        let out = t.render(&bind(&[(Placeholder::VehicleName, "Boxer")])).unwrap();
        assert!(out.contains("Detail the Boxer including"));
        assert!(!out.contains('{') && !out.contains('}'));
    }

    #[test]
    fn no_placeholder_template_is_identity() {
        let t = PromptTemplate::new("plain", "Nothing to see {here", TemplateRole::CaptionUser).unwrap();
        assert_eq!(t.render(&Bindings::new()).unwrap(), "Nothing to see {here");
        let caption_user = TemplateSet::builtin().get(TemplateRole::CaptionUser).clone();
        assert!(caption_user.placeholders().is_empty());
        assert_eq!(caption_user.render(&Bindings::new()).unwrap(), caption_user.body());
    }

    #[test]
    fn promptgen_template_embeds_batch_and_examples() {
        let captions: Vec<String> = (0..24)
            .map(|i| format!("Caption number {i} about a Boxer crossing terrain {}.", i * 7))
            .collect();
        let t = TemplateSet::builtin().get(TemplateRole::PromptgenUser).clone();
        let out = t
            .render(&bind(&[
                (Placeholder::Batch, "150"),
                (Placeholder::ExamplesList, &format_examples(&captions)),
            ]))
            .unwrap();
        // independent containment oracle
        assert!(out.contains("Create 150 new captions"));
        assert!(out.contains("Generate 150 diverse captions now"));
        for c in &captions {
            assert!(out.contains(c.as_str()), "missing {c}");
        }
        assert!(!out.contains("{batch}") && !out.contains("{examples_list}"));
    }

    #[test]
    fn missing_binding_names_token() {
        let t = TemplateSet::builtin().get(TemplateRole::PromptgenUser).clone();
        let err = t.render(&bind(&[(Placeholder::Batch, "3")])).unwrap_err();
        assert_eq!(
            err,
            PromptError::UnresolvedPlaceholder {
                template: "promptgen_user".into(),
                token: "examples_list".into()
            }
        );
    }

    #[test]
    fn unknown_placeholder_rejected() {
        let err = PromptTemplate::new("t", "Use {camera_model} here", TemplateRole::CaptionUser).unwrap_err();
        assert!(matches!(err, PromptError::UnknownPlaceholder { token, .. } if token == "camera_model"));
    }

    #[test]
    fn role_reassignment() {
        let set = TemplateSet::builtin();
        let swapped = set.with_roles(&BTreeMap::from([(TemplateRole::CaptionUser, TemplateRole::PromptgenSystem)]));
        assert_eq!(swapped.get(TemplateRole::CaptionUser).body(), set.get(TemplateRole::PromptgenSystem).body());
        assert_eq!(swapped.get(TemplateRole::CaptionUser).role, TemplateRole::CaptionUser);
    }

    proptest! {
        #[test]
        fn rendering_requires_every_placeholder(
            mask in 0u8..8,
            value in "[a-zA-Z0-9 ,.]{0,20}",
        ) {
            let body = "Gen {batch} for {vehicle_name}:\n{examples_list}\nAgain {batch}.";
            let t = PromptTemplate::new("all", body, TemplateRole::PromptgenUser).unwrap();
            let bindings: Bindings = Placeholder::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, p)| (*p, value.clone()))
                .collect();
            match t.render(&bindings) {
                Ok(out) => {
                    prop_assert_eq!(mask, 7);
                    for p in Placeholder::ALL {
                        let token = format!("{{{}}}", p.token());
                        prop_assert!(!out.contains(&token));
                    }
                }
                Err(PromptError::UnresolvedPlaceholder { token, .. }) => {
                    prop_assert!(mask != 7);
                    let p = Placeholder::from_token(&token).unwrap();
                    prop_assert!(!bindings.contains_key(&p));
                }
                Err(e) => prop_assert!(false, "unexpected {}", e),
            }
        }
    }
}
