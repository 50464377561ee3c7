//! Word templates with expert layouts, sampled against a scene.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::Answer;
use crate::error::{Error, Result};
use crate::executor::symbolic_execute;
use crate::layout::{Binding, ModuleKind, ModuleToken};
use crate::scene::{Color, Property, Relation, SceneGraph, SceneObject, Shape, Size};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Exist,
    Count,
    YesNo,
    Compare,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Exist,
        Category::Count,
        Category::YesNo,
        Category::Compare,
    ];

    /// Category of a layout, read off its root (final) token.
    pub fn of_root(kind: ModuleKind) -> Option<Category> {
        use ModuleKind::*;
        match kind {
            Exist | IsPresent => Some(Category::Exist),
            Count => Some(Category::Count),
            Describe => Some(Category::YesNo),
            Compare | EqualTo | GreaterThan | LessThan => Some(Category::Compare),
            Find | Filter | Relocate | And | Or => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Exist => "exist",
            Category::Count => "count",
            Category::YesNo => "yes_no",
            Category::Compare => "compare",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuestionInstance {
    pub question: Vec<String>,
    pub layout: Vec<ModuleToken>,
    pub answer: Answer,
    pub category: Category,
    pub template: usize,
}

pub const NUM_TEMPLATES: usize = 13;
const MAX_ATTEMPTS: usize = 64;

type Filled = (String, Vec<ModuleToken>);

/// One attempt at filling template `id`; `None` when the sampled bindings
/// miss the template's precondition.
fn fill(id: usize, scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Option<Filled> {
    use Binding as B;
    use ModuleKind::*;
    let t = ModuleToken::bound;
    let bare = ModuleToken::bare;
    Some(match id {
        0 => {
            let (c, s) = (color(scene, rng), shape(scene, rng));
            (
                format!("is there a {c} {s}"),
                vec![t(Find, B::Color(c)), t(Filter, B::Shape(s)), bare(Exist)],
            )
        }
        1 => {
            let (z, s) = (size(scene, rng), shape(scene, rng));
            (
                format!("is a {z} {s} present"),
                vec![t(Find, B::Size(z)), t(Filter, B::Shape(s)), bare(IsPresent)],
            )
        }
        2 => {
            let (c, s) = (color(scene, rng), shape(scene, rng));
            (
                format!("how many {c} {} are there", s.plural()),
                vec![t(Find, B::Color(c)), t(Filter, B::Shape(s)), bare(Count)],
            )
        }
        3 => {
            let (z, c) = (size(scene, rng), color(scene, rng));
            (
                format!("how many {z} {c} objects are there"),
                vec![t(Find, B::Size(z)), t(Find, B::Color(c)), bare(And), bare(Count)],
            )
        }
        4 => {
            let (c1, c2) = (color(scene, rng), color(scene, rng));
            if c1 == c2 {
                return None;
            }
            (
                format!("how many objects are {c1} or {c2}"),
                vec![t(Find, B::Color(c1)), t(Find, B::Color(c2)), bare(Or), bare(Count)],
            )
        }
        5 => {
            let o = unique_by(scene, rng, |a, b| a.color == b.color && a.shape == b.shape)?;
            let r = pick(Relation::ALL, rng);
            (
                format!("how many objects are {} the {} {}", r.phrase(), o.color, o.shape),
                vec![
                    t(Find, B::Color(o.color)),
                    t(Filter, B::Shape(o.shape)),
                    t(Relocate, B::Relation(r)),
                    bare(Count),
                ],
            )
        }
        6 => {
            let o = unique_by(scene, rng, |a, b| a.size == b.size && a.shape == b.shape)?;
            (
                format!("what color is the {} {}", o.size, o.shape),
                vec![
                    t(Find, B::Size(o.size)),
                    t(Filter, B::Shape(o.shape)),
                    t(Describe, B::Query(Property::Color)),
                ],
            )
        }
        7 => {
            let o = unique_by(scene, rng, |a, b| a.size == b.size && a.color == b.color)?;
            (
                format!("what shape is the {} {} object", o.size, o.color),
                vec![
                    t(Find, B::Size(o.size)),
                    t(Filter, B::Color(o.color)),
                    t(Describe, B::Query(Property::Shape)),
                ],
            )
        }
        8 => {
            let same = |a: &SceneObject, b: &SceneObject| a.color == b.color && a.shape == b.shape;
            let o1 = unique_by(scene, rng, same)?;
            let o2 = unique_by(scene, rng, same)?;
            if same(&o1, &o2) {
                return None;
            }
            (
                format!(
                    "is the {} {} the same size as the {} {}",
                    o1.color, o1.shape, o2.color, o2.shape
                ),
                vec![
                    t(Find, B::Color(o1.color)),
                    t(Filter, B::Shape(o1.shape)),
                    t(Find, B::Color(o2.color)),
                    t(Filter, B::Shape(o2.shape)),
                    t(Compare, B::Query(Property::Size)),
                ],
            )
        }
        9 => {
            let (c1, c2) = (color(scene, rng), color(scene, rng));
            if c1 == c2 {
                return None;
            }
            (
                format!("are there more {c1} objects than {c2} objects"),
                vec![t(Find, B::Color(c1)), t(Find, B::Color(c2)), bare(GreaterThan)],
            )
        }
        10 => {
            let (s1, s2) = (shape(scene, rng), shape(scene, rng));
            if s1 == s2 {
                return None;
            }
            (
                format!("are there fewer {} than {}", s1.plural(), s2.plural()),
                vec![t(Find, B::Shape(s1)), t(Find, B::Shape(s2)), bare(LessThan)],
            )
        }
        11 => {
            let (z, c) = (size(scene, rng), color(scene, rng));
            (
                format!("are there as many {z} objects as {c} objects"),
                vec![t(Find, B::Size(z)), t(Find, B::Color(c)), bare(EqualTo)],
            )
        }
        12 => {
            let o = unique_by(scene, rng, |a, b| a.color == b.color && a.shape == b.shape)?;
            let r = pick(Relation::ALL, rng);
            let (z2, c2) = (size(scene, rng), color(scene, rng));
            (
                format!(
                    "is there a {z2} {c2} object {} the {} {}",
                    r.phrase(),
                    o.color,
                    o.shape
                ),
                vec![
                    t(Find, B::Color(o.color)),
                    t(Filter, B::Shape(o.shape)),
                    t(Relocate, B::Relation(r)),
                    t(Find, B::Size(z2)),
                    t(Filter, B::Color(c2)),
                    bare(And),
                    bare(Exist),
                ],
            )
        }
        _ => return None,
    })
}

fn pick<T: Copy>(items: &[T], rng: &mut ChaCha8Rng) -> T {
    *items.choose(rng).expect("nonempty")
}

/// Half the time an attribute present in the scene, otherwise uniform, so
/// existence and count answers are not dominated by "no" and 0.
fn from_scene<T: Copy>(
    scene: &SceneGraph,
    rng: &mut ChaCha8Rng,
    all: &[T],
    get: fn(&SceneObject) -> T,
) -> T {
    if rng.gen_bool(0.5) {
        get(scene.objects.choose(rng).expect("scene has objects"))
    } else {
        pick(all, rng)
    }
}

fn color(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Color {
    from_scene(scene, rng, Color::ALL, |o| o.color)
}

fn shape(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Shape {
    from_scene(scene, rng, Shape::ALL, |o| o.shape)
}

fn size(scene: &SceneGraph, rng: &mut ChaCha8Rng) -> Size {
    from_scene(scene, rng, Size::ALL, |o| o.size)
}

/// A random object that no other object matches under `same`.
fn unique_by(
    scene: &SceneGraph,
    rng: &mut ChaCha8Rng,
    same: impl Fn(&SceneObject, &SceneObject) -> bool,
) -> Option<SceneObject> {
    let o = *scene.objects.choose(rng)?;
    let n = scene.objects.iter().filter(|p| same(p, &o)).count();
    (n == 1).then_some(o)
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Fills template `template` on `scene`, resampling bindings until the
/// template's preconditions hold.
pub fn generate_question(scene: &SceneGraph, template: usize, seed: u64) -> Result<QuestionInstance> {
    if template >= NUM_TEMPLATES {
        return Err(Error::Config(format!(
            "template {template} out of range 0..{NUM_TEMPLATES}"
        )));
    }
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let Some((text, layout)) = fill(template, scene, &mut rng) else {
            continue;
        };
        let answer = match symbolic_execute(&layout, scene) {
            Ok(a) => a,
            Err(Error::CountOverflow(_)) => continue,
            Err(e) => return Err(e),
        };
        let root = layout.last().expect("nonempty").kind;
        return Ok(QuestionInstance {
            question: tokenize(&text),
            category: Category::of_root(root).expect("template layouts end in a prediction"),
            layout,
            answer,
            template,
        });
    }
    Err(Error::TemplateInapplicable(template))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneConfig};

    #[test]
    fn count_template_shape() {
        let scene = generate_scene(&SceneConfig::default(), 3).unwrap();
        let q = generate_question(&scene, 2, 0).unwrap();
        assert_eq!(q.category, Category::Count);
        assert_eq!(q.layout.last().unwrap().kind, ModuleKind::Count);
        assert_eq!(q.question[..2], ["how", "many"]);
    }

    #[test]
    fn exist_template_answers_yes_or_no() {
        for seed in 0..50 {
            let scene = generate_scene(&SceneConfig::default(), seed).unwrap();
            let q = generate_question(&scene, 0, seed).unwrap();
            assert!(matches!(q.answer, Answer::Yes | Answer::No));
        }
    }

    #[test]
    fn templates_cover_every_module_and_category() {
        let mut kinds = std::collections::HashSet::new();
        let mut cats = std::collections::HashSet::new();
        let mut longest = 0;
        for template in 0..NUM_TEMPLATES {
            let q = (0..200)
                .find_map(|s| {
                    let scene = generate_scene(&SceneConfig::default(), s).ok()?;
                    generate_question(&scene, template, s).ok()
                })
                .unwrap_or_else(|| panic!("template {template} never applicable"));
            kinds.extend(q.layout.iter().map(|t| t.kind));
            cats.insert(q.category);
            longest = longest.max(q.layout.len());
        }
        assert_eq!(kinds.len(), 13);
        assert_eq!(cats.len(), 4);
        assert_eq!(longest, 7);
    }

    #[test]
    fn singleton_templates_fail_on_ambiguous_scenes() {
        use crate::scene::{Color, Shape, Size};
        let twin = |col| SceneObject {
            row: 0,
            col,
            shape: Shape::Circle,
            color: Color::Red,
            size: Size::Small,
        };
        let scene = SceneGraph {
            grid_size: 3,
            objects: vec![twin(0), twin(1)],
        };
        for template in [5, 6, 7, 8, 12] {
            assert!(matches!(
                generate_question(&scene, template, 0),
                Err(Error::TemplateInapplicable(t)) if t == template
            ));
        }
    }
}
