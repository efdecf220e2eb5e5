use std::fmt::Write;

use super::*;

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn literal(l: &Literal) -> String {
    match l {
        Literal::Symbol(s) => s.clone(),
        Literal::Str(s) => quote(s),
        Literal::Int(i) => i.to_string(),
        Literal::Float(f) => format!("{f:?}"),
    }
}

fn term(t: &Term) -> String {
    match t {
        Term::Var(v) => format!("?{v}"),
        Term::Wildcard => "?".into(),
        Term::Literal(l) => literal(l),
    }
}

fn pattern(p: &Pattern) -> String {
    let mut s = format!("({}", p.template);
    for t in &p.tests {
        let _ = write!(s, " ({} {})", t.slot, term(&t.term));
    }
    s.push(')');
    s
}

fn test_expr(t: &TestExpr) -> String {
    let args: Vec<String> = t.args.iter().map(term).collect();
    let inner = format!("({} {})", t.predicate.name(), args.join(" "));
    if t.negated {
        format!("(not {inner})")
    } else {
        inner
    }
}

fn action(a: &Action) -> String {
    match a {
        Action::AssertDecision { action, target, reason } => match target {
            Some(t) => format!("(assert-decision {action} ?{t} {})", quote(reason)),
            None => format!("(assert-decision {action} {})", quote(reason)),
        },
        Action::SetCategory(CategoryExpr::Literal(c)) => format!("(set-category {c})"),
        Action::SetCategory(CategoryExpr::OfRelation(v)) => format!("(set-category (category-of ?{v}))"),
        Action::MarkDuplicate { target, reason } => format!("(mark-duplicate ?{target} {})", quote(reason)),
        Action::BindRetraction { target, reason } => format!("(bind-retraction ?{target} {})", quote(reason)),
    }
}

fn join<I: IntoIterator<Item = String>>(items: I) -> String {
    items.into_iter().map(|s| format!(" {s}")).collect()
}

/// Canonical text for a pack; `parse_rule_pack` inverts it.
pub fn print_rule_pack(pack: &RulePack) -> String {
    let mut out = String::new();
    for t in &pack.templates {
        let _ = write!(out, "(deftemplate {}", t.name);
        for s in &t.slots {
            let kw = if s.multi { "multislot" } else { "slot" };
            let _ = write!(out, "\n   ({kw} {} (type {}))", s.name, s.ty.keyword());
        }
        out.push_str(")\n\n");
    }

    let p = &pack.policy;
    out.push_str("(defpolicy\n   (category-map");
    for (pat, cat) in &p.category_map {
        let _ = write!(out, "\n      ({pat} {cat})");
    }
    out.push(')');
    let _ = write!(out, "\n   (multi-valued{})", join(p.multi_valued.iter().map(|x| x.to_string())));
    let _ = write!(
        out,
        "\n   (negation-relations{})",
        join(p.negation_relations.iter().map(|x| x.to_string()))
    );
    out.push_str("\n   (negation-targets");
    for (neg, targets) in &p.negation_targets {
        let _ = write!(out, " ({neg}{})", join(targets.iter().cloned()));
    }
    out.push(')');
    let _ = write!(
        out,
        "\n   (auto-long-term{})",
        join(p.auto_long_term_categories.iter().map(|c| c.to_string()))
    );
    let _ = write!(out, "\n   (similarity-threshold {:?}))\n", p.similarity_threshold);

    for r in &pack.rules {
        let _ = write!(
            out,
            "\n(defrule {}\n   (declare (phase {}) (salience {}))",
            r.name,
            r.phase.as_str(),
            r.salience
        );
        for c in &r.conditions {
            let text = match c {
                Condition::Match(p) => pattern(p),
                Condition::NotExists(p) => format!("(not {})", pattern(p)),
                Condition::Test(t) => format!("(test {})", test_expr(t)),
            };
            let _ = write!(out, "\n   {text}");
        }
        out.push_str("\n   =>");
        for a in &r.actions {
            let _ = write!(out, "\n   {}", action(a));
        }
        out.push_str(")\n");
    }
    out
}
