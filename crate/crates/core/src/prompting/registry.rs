//! Template lookup by (family, dataset kind, variant). Built-in templates are
//! compiled in; a directory laid out as `{family}/{kind}/{variant}.txt` can
//! override or extend them.

use std::collections::BTreeMap;
use std::path::Path;

use super::template::Template;
use super::{Family, PromptError, TemplateId};
use crate::corpus::DatasetKind;

macro_rules! builtin {
    ($($family:literal / $kind:literal / $variant:literal),* $(,)?) => {
        &[$((
            $family,
            $kind,
            $variant,
            include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/templates/", $family, "/", $kind, "/", $variant, ".txt")),
        )),*]
    };
}

const BUILTIN: &[(&str, &str, &str, &str)] = builtin![
    "item_description" / "movies" / "v1",
    "item_description" / "products" / "v1",
    "user_profile" / "movies" / "v1",
    "user_profile" / "products" / "v1",
    "reasoning_gt" / "movies" / "v1",
    "reasoning_gt" / "products" / "v1",
    "reasoning_rec" / "movies" / "v1",
    "reasoning_rec" / "movies" / "v2",
    "reasoning_rec" / "movies" / "v3",
    "reasoning_rec" / "movies" / "no_profile",
    "reasoning_rec" / "movies" / "no_description",
    "reasoning_rec" / "products" / "v1",
    "reasoning_rec" / "products" / "v2",
    "reasoning_rec" / "products" / "v3",
    "reasoning_rec" / "products" / "no_profile",
    "reasoning_rec" / "products" / "no_description",
    "vanilla" / "movies" / "v1",
    "vanilla" / "products" / "v1",
];

/// Slots each family's templates must mention.
fn required_slots(family: Family) -> &'static [&'static str] {
    match family {
        Family::ItemDescription => &["title", "n_words"],
        Family::UserProfile => &["history", "q_words"],
        Family::ReasoningGt => &["verb", "target"],
        Family::ReasoningRec | Family::Vanilla => &["target_title"],
    }
}

#[derive(Debug, Clone)]
pub struct Registry {
    templates: BTreeMap<TemplateId, Template>,
}

impl Registry {
    pub fn builtin() -> Registry {
        let mut reg = Registry {
            templates: BTreeMap::new(),
        };
        for (family, kind, variant, src) in BUILTIN {
            let id = TemplateId::new(family.parse().unwrap(), kind.parse().unwrap(), *variant);
            reg.insert(id, src).expect("built-in templates are valid");
        }
        reg
    }

    /// Built-ins overlaid with every `{family}/{kind}/{variant}.txt` under `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Registry, PromptError> {
        let mut reg = Registry::builtin();
        let io = |e: std::io::Error| PromptError::Load(format!("{}: {e}", dir.display()));
        for fam in std::fs::read_dir(dir).map_err(io)? {
            let fam = fam.map_err(io)?.path();
            let Some(family) = fam.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<Family>().ok()) else {
                continue;
            };
            for kd in std::fs::read_dir(&fam).map_err(io)? {
                let kd = kd.map_err(io)?.path();
                let Some(kind) = kd.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<DatasetKind>().ok())
                else {
                    continue;
                };
                for f in std::fs::read_dir(&kd).map_err(io)? {
                    let f = f.map_err(io)?.path();
                    if f.extension().and_then(|e| e.to_str()) != Some("txt") {
                        continue;
                    }
                    let variant = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
                    let src = std::fs::read_to_string(&f).map_err(io)?;
                    reg.insert(TemplateId::new(family, kind, variant), &src)
                        .map_err(|e| PromptError::Load(format!("{}: {e}", f.display())))?;
                }
            }
        }
        Ok(reg)
    }

    fn insert(&mut self, id: TemplateId, src: &str) -> Result<(), PromptError> {
        let template = Template::parse(src.trim_end_matches(['\n', '\r']))
            .map_err(|e| PromptError::Load(format!("{id}: {e}")))?;
        let names = template.slot_names();
        for slot in required_slots(id.family) {
            if !names.contains(slot) {
                return Err(PromptError::Load(format!("{id}: template never uses {{{slot}}}")));
            }
        }
        self.templates.insert(id, template);
        Ok(())
    }

    pub fn get(&self, id: &TemplateId) -> Result<&Template, PromptError> {
        self.templates
            .get(id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn contains(&self, id: &TemplateId) -> bool {
        self.templates.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &TemplateId> {
        self.templates.keys()
    }

    /// Whether rendering `id` consumes a user profile.
    pub fn uses_profile(&self, id: &TemplateId) -> Result<bool, PromptError> {
        Ok(self.get(id)?.slot_names().contains(&"profile"))
    }

    /// Whether rendering `id` consumes generated item descriptions.
    pub fn uses_descriptions(&self, id: &TemplateId) -> Result<bool, PromptError> {
        let t = self.get(id)?;
        let names = t.slot_names();
        Ok(names.contains(&"history") || names.contains(&"target"))
    }
}

impl Default for Registry {
    fn default() -> Self {
        Registry::builtin()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_builtins_load() {
        let reg = Registry::builtin();
        assert_eq!(reg.ids().count(), BUILTIN.len());
        for kind in [DatasetKind::Movies, DatasetKind::Products] {
            for fam in Family::ALL {
                assert!(reg.contains(&TemplateId::new(fam, kind, "v1")), "{fam} {kind}");
            }
        }
    }

    #[test]
    fn ablation_variants_declare_their_inputs() {
        let reg = Registry::builtin();
        let id = |v: &str| TemplateId::new(Family::ReasoningRec, DatasetKind::Movies, v);
        assert!(reg.uses_profile(&id("v1")).unwrap());
        assert!(!reg.uses_profile(&id("no_profile")).unwrap());
        assert!(reg.uses_profile(&id("no_description")).unwrap());
        assert!(!reg.uses_descriptions(&id("no_description")).unwrap());
        let vanilla = TemplateId::new(Family::Vanilla, DatasetKind::Products, "v1");
        assert!(!reg.uses_profile(&vanilla).unwrap());
        assert!(!reg.uses_descriptions(&vanilla).unwrap());
    }

    #[test]
    fn directory_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().join("vanilla/movies");
        std::fs::create_dir_all(&d).unwrap();
        std::fs::write(d.join("terse.txt"), "Will the user like {target_title}? Prediction: Yes or No\n").unwrap();
        let reg = Registry::with_overrides(dir.path()).unwrap();
        assert!(reg.contains(&TemplateId::new(Family::Vanilla, DatasetKind::Movies, "terse")));
        assert!(reg.contains(&TemplateId::new(Family::Vanilla, DatasetKind::Movies, "v1")));

        std::fs::write(d.join("broken.txt"), "no target here").unwrap();
        assert!(matches!(Registry::with_overrides(dir.path()), Err(PromptError::Load(_))));
    }
}
