//! Set-based oracle evaluation of bound layouts over scene graphs.

use std::collections::BTreeSet;

use crate::answer::Answer;
use crate::error::{Error, Result};
use crate::layout::{validate, Binding, ModuleKind, ModuleToken};
use crate::scene::{Property, SceneGraph, SceneObject};

/// Set of occupied cells, as indices into `scene.objects`.
type ObjectSet = BTreeSet<usize>;

enum Value {
    Set(ObjectSet),
    Answer(Answer),
}

fn matches(o: &SceneObject, b: &Binding) -> bool {
    match b {
        Binding::Color(c) => o.color == *c,
        Binding::Shape(s) => o.shape == *s,
        Binding::Size(z) => o.size == *z,
        Binding::Relation(_) | Binding::Query(_) => false,
    }
}

fn property_answer(o: &SceneObject, p: Property) -> Answer {
    match p {
        Property::Color => Answer::Color(o.color),
        Property::Shape => Answer::Shape(o.shape),
        Property::Size => Answer::Size(o.size),
    }
}

/// Runs `tokens` on `scene`. Every token that takes an argument must carry
/// a binding of the right kind.
pub fn symbolic_execute(tokens: &[ModuleToken], scene: &SceneGraph) -> Result<Answer> {
    run(tokens, scene, &mut |_, _| {})
}

/// Like [`symbolic_execute`], also returning the grid cells selected by
/// every attention token, indexed by postfix position (`None` for the root).
pub fn symbolic_trace(
    tokens: &[ModuleToken],
    scene: &SceneGraph,
) -> Result<(Answer, Vec<Option<Vec<usize>>>)> {
    let mut sets = vec![None; tokens.len()];
    let answer = run(tokens, scene, &mut |i, set| {
        sets[i] = Some(set.iter().map(|&o| scene.cell_index(&scene.objects[o])).collect());
    })?;
    Ok((answer, sets))
}

fn run(
    tokens: &[ModuleToken],
    scene: &SceneGraph,
    observe: &mut dyn FnMut(usize, &ObjectSet),
) -> Result<Answer> {
    let report = validate(tokens);
    if !report.is_valid() {
        return Err(Error::InvalidLayout(report));
    }
    let mut stack: Vec<ObjectSet> = Vec::new();
    for (index, token) in tokens.iter().enumerate() {
        let binding_err = |message: &str| Error::Binding {
            index: index + 1,
            token: token.to_string(),
            message: message.to_string(),
        };
        let needs_binding = matches!(
            token.kind,
            ModuleKind::Find
                | ModuleKind::Filter
                | ModuleKind::Relocate
                | ModuleKind::Describe
                | ModuleKind::Compare
        );
        let binding = match (&token.binding, needs_binding) {
            (None, true) => return Err(binding_err("missing binding")),
            (Some(b), _) if !token.kind.accepts(b) => {
                return Err(binding_err("binding does not fit this module"))
            }
            (b, _) => b.as_ref(),
        };
        let singleton = |set: &ObjectSet| -> Result<usize> {
            if set.len() == 1 {
                Ok(*set.iter().next().expect("len 1"))
            } else {
                Err(Error::Ambiguous {
                    index: index + 1,
                    token: token.to_string(),
                    found: set.len(),
                })
            }
        };
        let arity = token.kind.arity();
        let args = stack.split_off(stack.len() - arity);
        let value = match token.kind {
            ModuleKind::Find => {
                let b = binding.expect("checked");
                Value::Set(
                    (0..scene.objects.len())
                        .filter(|&i| matches(&scene.objects[i], b))
                        .collect(),
                )
            }
            ModuleKind::Filter => {
                let b = binding.expect("checked");
                Value::Set(
                    args[0]
                        .iter()
                        .copied()
                        .filter(|&i| matches(&scene.objects[i], b))
                        .collect(),
                )
            }
            ModuleKind::Relocate => {
                let Some(Binding::Relation(rel)) = binding else {
                    unreachable!("checked by accepts")
                };
                Value::Set(
                    (0..scene.objects.len())
                        .filter(|&i| {
                            args[0].iter().any(|&a| {
                                rel.holds(scene.objects[i].cell(), scene.objects[a].cell())
                            })
                        })
                        .collect(),
                )
            }
            ModuleKind::And => Value::Set(args[0].intersection(&args[1]).copied().collect()),
            ModuleKind::Or => Value::Set(args[0].union(&args[1]).copied().collect()),
            ModuleKind::Exist | ModuleKind::IsPresent => {
                Value::Answer(Answer::yes_no(!args[0].is_empty()))
            }
            ModuleKind::Count => Value::Answer(Answer::count(args[0].len())?),
            ModuleKind::Describe => {
                let Some(Binding::Query(p)) = binding else {
                    unreachable!("checked by accepts")
                };
                let o = singleton(&args[0])?;
                Value::Answer(property_answer(&scene.objects[o], *p))
            }
            ModuleKind::Compare => {
                let Some(Binding::Query(p)) = binding else {
                    unreachable!("checked by accepts")
                };
                let a = singleton(&args[0])?;
                let b = singleton(&args[1])?;
                Value::Answer(Answer::yes_no(
                    property_answer(&scene.objects[a], *p)
                        == property_answer(&scene.objects[b], *p),
                ))
            }
            ModuleKind::GreaterThan => Value::Answer(Answer::yes_no(args[0].len() > args[1].len())),
            ModuleKind::LessThan => Value::Answer(Answer::yes_no(args[0].len() < args[1].len())),
            ModuleKind::EqualTo => Value::Answer(Answer::yes_no(args[0].len() == args[1].len())),
        };
        match value {
            Value::Set(s) => {
                observe(index, &s);
                stack.push(s)
            }
            Value::Answer(a) => return Ok(a),
        }
    }
    unreachable!("validated layouts end in a prediction")
}
