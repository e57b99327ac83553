//! Prompt templates. Defaults are compiled in; a directory of same-named
//! files overrides them at runtime.

use std::path::Path;

use minijinja::{Environment, UndefinedBehavior};
use serde::Serialize;

use crate::error::{Error, Result};

const DEFAULTS: &[(&str, &str)] = &[
    ("insight_system", include_str!("../../templates/insight_system.j2")),
    ("insight_user", include_str!("../../templates/insight_user.j2")),
    ("reflect_system", include_str!("../../templates/reflect_system.j2")),
    ("reflect_user", include_str!("../../templates/reflect_user.j2")),
    ("opportunity_system", include_str!("../../templates/opportunity_system.j2")),
    ("opportunity_user", include_str!("../../templates/opportunity_user.j2")),
    ("judge_system", include_str!("../../templates/judge_system.j2")),
    ("judge_user", include_str!("../../templates/judge_user.j2")),
    ("attribute_score_system", include_str!("../../templates/attribute_score_system.j2")),
    ("attribute_score_user", include_str!("../../templates/attribute_score_user.j2")),
];

pub const TEMPLATE_EXTENSION: &str = "j2";

pub struct PromptTemplates {
    env: Environment<'static>,
}

impl std::fmt::Debug for PromptTemplates {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptTemplates").finish_non_exhaustive()
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        let mut env = base_env();
        for (name, src) in DEFAULTS {
            env.add_template(name, src).expect("built-in template parses");
        }
        Self { env }
    }

    /// Built-ins, with `<dir>/<name>.j2` taking precedence where present.
    pub fn with_overrides(dir: &Path) -> Result<Self> {
        let mut env = base_env();
        for (name, src) in DEFAULTS {
            let path = dir.join(format!("{name}.{TEMPLATE_EXTENSION}"));
            let source = if path.exists() {
                log::info!("prompt template `{name}` overridden by {}", path.display());
                std::fs::read_to_string(&path)?
            } else {
                (*src).to_string()
            };
            env.add_template_owned(*name, source)
                .map_err(|e| Error::Template(format!("{}: {e}", path.display())))?;
        }
        Ok(Self { env })
    }

    pub fn names() -> impl Iterator<Item = &'static str> {
        DEFAULTS.iter().map(|(n, _)| *n)
    }

    pub fn render<S: Serialize>(&self, name: &str, ctx: S) -> Result<String> {
        self.env
            .get_template(name)
            .and_then(|t| t.render(ctx))
            .map_err(|e| Error::Template(format!("{name}: {e}")))
    }

    /// Renders `<stem>_system` and `<stem>_user` with the same context.
    pub fn render_pair<S: Serialize>(&self, stem: &str, ctx: &S) -> Result<(String, String)> {
        Ok((
            self.render(&format!("{stem}_system"), ctx)?,
            self.render(&format!("{stem}_user"), ctx)?,
        ))
    }
}

fn base_env() -> Environment<'static> {
    let mut env = Environment::new();
    env.set_trim_blocks(true);
    env.set_lstrip_blocks(true);
    env.set_keep_trailing_newline(true);
    env.set_undefined_behavior(UndefinedBehavior::Strict);
    env
}
