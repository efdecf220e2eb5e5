use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::policy::default_auto_long_term;
use super::*;
use crate::model::is_token;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Pos {
    line: usize,
    column: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Atom {
    Symbol(String),
    Str(String),
    Int(i64),
    Float(f64),
    Var(String),
    Wildcard,
}

impl Atom {
    fn display(&self) -> String {
        match self {
            Atom::Symbol(s) => s.clone(),
            Atom::Str(s) => format!("{s:?}"),
            Atom::Int(i) => i.to_string(),
            Atom::Float(f) => format!("{f:?}"),
            Atom::Var(v) => format!("?{v}"),
            Atom::Wildcard => "?".into(),
        }
    }
}

#[derive(Debug, Clone)]
enum Sexp {
    Atom(Atom, Pos),
    List(Vec<Sexp>, Pos),
}

impl Sexp {
    fn pos(&self) -> Pos {
        match self {
            Sexp::Atom(_, p) | Sexp::List(_, p) => *p,
        }
    }

    fn display(&self) -> String {
        match self {
            Sexp::Atom(a, _) => a.display(),
            Sexp::List(items, _) => match items.first() {
                Some(head) => format!("({} ...)", head.display()),
                None => "()".into(),
            },
        }
    }

    fn symbol(&self) -> Option<&str> {
        match self {
            Sexp::Atom(Atom::Symbol(s), _) => Some(s),
            _ => None,
        }
    }
}

fn syntax(at: &Sexp, message: impl Into<String>) -> RuleError {
    let p = at.pos();
    RuleError::Syntax {
        line: p.line,
        column: p.column,
        token: at.display(),
        message: message.into(),
    }
}

fn syntax_at(pos: Pos, token: impl Into<String>, message: impl Into<String>) -> RuleError {
    RuleError::Syntax {
        line: pos.line,
        column: pos.column,
        token: token.into(),
        message: message.into(),
    }
}

fn semantic(rule: Option<&str>, message: impl Into<String>) -> RuleError {
    RuleError::Semantic(SemanticError {
        rule: rule.map(str::to_string),
        message: message.into(),
    })
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

struct Reader<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    pos: Pos,
}

impl<'a> Reader<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            chars: src.chars().peekable(),
            pos: Pos { line: 1, column: 1 },
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.pos.line += 1;
            self.pos.column = 1;
        } else {
            self.pos.column += 1;
        }
        Some(c)
    }

    fn skip_trivia(&mut self) {
        while let Some(&c) = self.chars.peek() {
            if c.is_whitespace() {
                self.bump();
            } else if c == ';' {
                while let Some(&c) = self.chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    self.bump();
                }
            } else {
                break;
            }
        }
    }

    fn read_all(mut self) -> Result<Vec<Sexp>, RuleError> {
        let mut out = Vec::new();
        loop {
            self.skip_trivia();
            match self.chars.peek() {
                None => return Ok(out),
                Some(')') => return Err(syntax_at(self.pos, ")", "unbalanced closing parenthesis")),
                Some(_) => out.push(self.read()?),
            }
        }
    }

    fn read(&mut self) -> Result<Sexp, RuleError> {
        self.skip_trivia();
        let start = self.pos;
        match self.chars.peek().copied() {
            None => Err(syntax_at(start, "<eof>", "unexpected end of input")),
            Some('(') => {
                self.bump();
                let mut items = Vec::new();
                loop {
                    self.skip_trivia();
                    match self.chars.peek() {
                        None => return Err(syntax_at(start, "(", "unclosed parenthesis")),
                        Some(')') => {
                            self.bump();
                            return Ok(Sexp::List(items, start));
                        }
                        Some(_) => items.push(self.read()?),
                    }
                }
            }
            Some('"') => {
                self.bump();
                let mut s = String::new();
                loop {
                    match self.bump() {
                        None => return Err(syntax_at(start, "\"", "unterminated string")),
                        Some('"') => break,
                        Some('\\') => match self.bump() {
                            Some('n') => s.push('\n'),
                            Some('t') => s.push('\t'),
                            Some('"') => s.push('"'),
                            Some('\\') => s.push('\\'),
                            Some(other) => {
                                return Err(syntax_at(self.pos, format!("\\{other}"), "unknown escape"))
                            }
                            None => return Err(syntax_at(start, "\"", "unterminated string")),
                        },
                        Some(c) => s.push(c),
                    }
                }
                Ok(Sexp::Atom(Atom::Str(s), start))
            }
            Some(_) => {
                let mut text = String::new();
                while let Some(&c) = self.chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' || c == '"' || c == ';' {
                        break;
                    }
                    text.push(c);
                    self.bump();
                }
                Ok(Sexp::Atom(classify_atom(&text, start)?, start))
            }
        }
    }
}

fn classify_atom(text: &str, pos: Pos) -> Result<Atom, RuleError> {
    if let Some(var) = text.strip_prefix('?') {
        if var.is_empty() {
            return Ok(Atom::Wildcard);
        }
        if var.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Ok(Atom::Var(var.to_string()));
        }
        return Err(syntax_at(pos, text, "invalid variable name"));
    }
    let numeric_start = text
        .chars()
        .next()
        .is_some_and(|c| c.is_ascii_digit() || ((c == '-' || c == '+') && text.len() > 1));
    if numeric_start && text.chars().skip(1).all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '-' | '+')) {
        if let Ok(i) = text.parse::<i64>() {
            return Ok(Atom::Int(i));
        }
        if let Ok(f) = text.parse::<f64>() {
            if f.is_finite() {
                return Ok(Atom::Float(f));
            }
        }
        return Err(syntax_at(pos, text, "malformed number"));
    }
    Ok(Atom::Symbol(text.to_string()))
}

// ---------------------------------------------------------------------------
// Forms
// ---------------------------------------------------------------------------

fn list_items<'s>(sexp: &'s Sexp, what: &str) -> Result<&'s [Sexp], RuleError> {
    match sexp {
        Sexp::List(items, _) => Ok(items),
        Sexp::Atom(..) => Err(syntax(sexp, format!("expected a parenthesized {what}"))),
    }
}

fn head<'s>(sexp: &'s Sexp, what: &str) -> Result<(&'s str, &'s [Sexp]), RuleError> {
    let items = list_items(sexp, what)?;
    match items.split_first() {
        Some((first, rest)) => match first.symbol() {
            Some(h) => Ok((h, rest)),
            None => Err(syntax(first, format!("expected a keyword at the start of {what}"))),
        },
        None => Err(syntax(sexp, format!("empty {what}"))),
    }
}

fn expect_symbol<'s>(sexp: &'s Sexp, what: &str) -> Result<&'s str, RuleError> {
    sexp.symbol().ok_or_else(|| syntax(sexp, format!("expected {what}")))
}

fn expect_string(sexp: &Sexp, what: &str) -> Result<String, RuleError> {
    match sexp {
        Sexp::Atom(Atom::Str(s), _) => Ok(s.clone()),
        _ => Err(syntax(sexp, format!("expected {what} as a quoted string"))),
    }
}

fn expect_var(sexp: &Sexp, what: &str) -> Result<String, RuleError> {
    match sexp {
        Sexp::Atom(Atom::Var(v), _) => Ok(v.clone()),
        _ => Err(syntax(sexp, format!("expected {what} as a ?variable"))),
    }
}

fn expect_arity(sexp: &Sexp, rest: &[Sexp], n: usize, what: &str) -> Result<(), RuleError> {
    if rest.len() == n {
        Ok(())
    } else {
        Err(syntax(sexp, format!("{what} takes {n} argument(s), found {}", rest.len())))
    }
}

fn parse_category(sexp: &Sexp) -> Result<Category, RuleError> {
    let s = expect_symbol(sexp, "a category")?;
    s.parse::<Category>().map_err(|e| syntax(sexp, e.to_string()))
}

fn parse_template(sexp: &Sexp, rest: &[Sexp]) -> Result<TemplateDef, RuleError> {
    let (name, slots) = rest
        .split_first()
        .ok_or_else(|| syntax(sexp, "deftemplate needs a name"))?;
    let name = expect_symbol(name, "a template name")?.to_string();
    let mut defs = Vec::new();
    for slot in slots {
        let (kind, args) = head(slot, "slot declaration")?;
        let multi_keyword = match kind {
            "slot" => false,
            "multislot" => true,
            _ => return Err(syntax(slot, "expected `slot` or `multislot`")),
        };
        let (slot_name, facets) = args
            .split_first()
            .ok_or_else(|| syntax(slot, "slot needs a name"))?;
        let slot_name = expect_symbol(slot_name, "a slot name")?.to_string();
        let mut ty = SlotType::Symbol;
        let mut multi = multi_keyword;
        for facet in facets {
            let (fname, fargs) = head(facet, "slot facet")?;
            if fname != "type" {
                return Err(syntax(facet, format!("unsupported slot facet `{fname}`")));
            }
            expect_arity(facet, fargs, 1, "type")?;
            ty = match expect_symbol(&fargs[0], "a slot type")? {
                "SYMBOL" => SlotType::Symbol,
                "STRING" => SlotType::String,
                "FLOAT" => SlotType::Float,
                "INTEGER" => SlotType::Integer,
                "MULTISLOT" => {
                    multi = true;
                    SlotType::Symbol
                }
                _ => return Err(syntax(&fargs[0], "unknown slot type")),
            };
        }
        defs.push(SlotDef {
            name: slot_name,
            ty,
            multi,
        });
    }
    Ok(TemplateDef { name, slots: defs })
}

fn parse_relation_pattern(sexp: &Sexp) -> Result<RelationPattern, RuleError> {
    let s = expect_symbol(sexp, "a relation pattern")?;
    RelationPattern::parse(s).ok_or_else(|| syntax(sexp, "relation patterns are tokens with an optional trailing *"))
}

struct PolicyDraft {
    policy: RelationPolicy,
    declared_map: bool,
}

fn parse_policy(rest: &[Sexp]) -> Result<PolicyDraft, RuleError> {
    let mut policy = RelationPolicy {
        category_map: Vec::new(),
        multi_valued: BTreeSet::new(),
        negation_relations: BTreeSet::new(),
        negation_targets: BTreeMap::new(),
        auto_long_term_categories: default_auto_long_term(),
        similarity_threshold: crate::entity::DEFAULT_SIMILARITY_THRESHOLD,
    };
    let mut declared_map = false;
    let mut seen = HashSet::new();
    for clause in rest {
        let (name, args) = head(clause, "policy clause")?;
        if !seen.insert(name) {
            return Err(semantic(None, format!("policy clause `{name}` declared twice")));
        }
        match name {
            "category-map" => {
                declared_map = true;
                for entry in args {
                    let items = list_items(entry, "category mapping")?;
                    if items.len() != 2 {
                        return Err(syntax(entry, "category mapping is (relation-pattern category)"));
                    }
                    policy
                        .category_map
                        .push((parse_relation_pattern(&items[0])?, parse_category(&items[1])?));
                }
            }
            "multi-valued" => {
                for a in args {
                    policy.multi_valued.insert(parse_relation_pattern(a)?);
                }
            }
            "negation-relations" => {
                for a in args {
                    policy.negation_relations.insert(parse_relation_pattern(a)?);
                }
            }
            "negation-targets" => {
                for entry in args {
                    let items = list_items(entry, "negation target list")?;
                    let (neg, targets) = items
                        .split_first()
                        .ok_or_else(|| syntax(entry, "empty negation target list"))?;
                    let neg = expect_symbol(neg, "a negation relation")?;
                    let mut set = BTreeSet::new();
                    for t in targets {
                        let t = expect_symbol(t, "a relation")?;
                        if !is_token(t) {
                            return Err(syntax_at(entry.pos(), t, "relation must be a token"));
                        }
                        set.insert(t.to_string());
                    }
                    policy.negation_targets.insert(neg.to_string(), set);
                }
            }
            "auto-long-term" => {
                policy.auto_long_term_categories = args.iter().map(parse_category).collect::<Result<_, _>>()?;
            }
            "similarity-threshold" => {
                expect_arity(clause, args, 1, "similarity-threshold")?;
                let t = match &args[0] {
                    Sexp::Atom(Atom::Float(f), _) => *f,
                    Sexp::Atom(Atom::Int(i), _) => *i as f64,
                    other => return Err(syntax(other, "expected a number")),
                };
                policy.similarity_threshold =
                    crate::entity::check_threshold(t).map_err(|e| semantic(None, e.to_string()))?;
            }
            _ => return Err(syntax(clause, format!("unknown policy clause `{name}`"))),
        }
    }
    Ok(PolicyDraft { policy, declared_map })
}

fn atom_term(sexp: &Sexp, allow_wildcard: bool) -> Result<Term, RuleError> {
    match sexp {
        Sexp::Atom(a, _) => Ok(match a {
            Atom::Var(v) => Term::Var(v.clone()),
            Atom::Wildcard if allow_wildcard => Term::Wildcard,
            Atom::Wildcard => return Err(syntax(sexp, "wildcard is only allowed in slot tests")),
            Atom::Symbol(s) => Term::Literal(Literal::Symbol(s.clone())),
            Atom::Str(s) => Term::Literal(Literal::Str(s.clone())),
            Atom::Int(i) => Term::Literal(Literal::Int(*i)),
            Atom::Float(f) => Term::Literal(Literal::Float(*f)),
        }),
        Sexp::List(..) => Err(syntax(sexp, "expected a variable or constant")),
    }
}

fn parse_pattern(sexp: &Sexp, template: &str, rest: &[Sexp]) -> Result<Pattern, RuleError> {
    let mut tests = Vec::new();
    for t in rest {
        let items = list_items(t, "slot test")?;
        if items.len() != 2 {
            return Err(syntax(t, "slot test is (slot-name value)"));
        }
        let slot = expect_symbol(&items[0], "a slot name")?.to_string();
        tests.push(SlotTest {
            slot,
            term: atom_term(&items[1], true)?,
        });
    }
    let _ = sexp;
    Ok(Pattern {
        template: template.to_string(),
        tests,
    })
}

fn parse_test_expr(sexp: &Sexp) -> Result<TestExpr, RuleError> {
    let (name, args) = head(sexp, "test expression")?;
    if name == "not" {
        expect_arity(sexp, args, 1, "not")?;
        let mut inner = parse_test_expr(&args[0])?;
        if inner.negated {
            return Err(syntax(sexp, "double negation is not supported"));
        }
        inner.negated = true;
        return Ok(inner);
    }
    let predicate = Predicate::parse(name).ok_or_else(|| syntax(sexp, format!("unknown predicate `{name}`")))?;
    expect_arity(sexp, args, predicate.arity(), name)?;
    Ok(TestExpr {
        negated: false,
        predicate,
        args: args.iter().map(|a| atom_term(a, false)).collect::<Result<_, _>>()?,
    })
}

fn parse_action(sexp: &Sexp) -> Result<Action, RuleError> {
    let (name, args) = head(sexp, "action")?;
    match name {
        "assert-decision" => {
            let (kind, rest) = args
                .split_first()
                .ok_or_else(|| syntax(sexp, "assert-decision needs an action"))?;
            let action = DecisionAction::parse(expect_symbol(kind, "a decision action")?)
                .ok_or_else(|| syntax(kind, "unknown decision action"))?;
            let (target, reason) = match rest {
                [reason] => (None, expect_string(reason, "a reason")?),
                [target, reason] => (Some(expect_var(target, "a target")?), expect_string(reason, "a reason")?),
                _ => return Err(syntax(sexp, "assert-decision is (assert-decision action [?target] \"reason\")")),
            };
            Ok(Action::AssertDecision { action, target, reason })
        }
        "set-category" => {
            expect_arity(sexp, args, 1, "set-category")?;
            match &args[0] {
                Sexp::List(..) => {
                    let (fname, fargs) = head(&args[0], "category lookup")?;
                    if fname != "category-of" {
                        return Err(syntax(&args[0], "expected (category-of ?relation)"));
                    }
                    expect_arity(&args[0], fargs, 1, "category-of")?;
                    Ok(Action::SetCategory(CategoryExpr::OfRelation(expect_var(&fargs[0], "a relation")?)))
                }
                atom => Ok(Action::SetCategory(CategoryExpr::Literal(parse_category(atom)?))),
            }
        }
        "mark-duplicate" | "bind-retraction" => {
            expect_arity(sexp, args, 2, name)?;
            let target = expect_var(&args[0], "a target")?;
            let reason = expect_string(&args[1], "a reason")?;
            Ok(if name == "mark-duplicate" {
                Action::MarkDuplicate { target, reason }
            } else {
                Action::BindRetraction { target, reason }
            })
        }
        _ => Err(syntax(sexp, format!("unknown action `{name}`"))),
    }
}

fn parse_rule(sexp: &Sexp, rest: &[Sexp]) -> Result<RuleDef, RuleError> {
    let (name, body) = rest.split_first().ok_or_else(|| syntax(sexp, "defrule needs a name"))?;
    let name = expect_symbol(name, "a rule name")?.to_string();
    let mut phase = None;
    let mut salience = 0i64;
    let mut conditions = Vec::new();
    let mut actions = Vec::new();
    let mut seen_arrow = false;
    for item in body {
        if item.symbol() == Some("=>") {
            if seen_arrow {
                return Err(syntax(item, "second `=>` in rule"));
            }
            seen_arrow = true;
            continue;
        }
        if seen_arrow {
            actions.push(parse_action(item)?);
            continue;
        }
        let (kw, args) = head(item, "condition")?;
        match kw {
            "declare" => {
                for d in args {
                    let (dname, dargs) = head(d, "declaration")?;
                    expect_arity(d, dargs, 1, dname)?;
                    match dname {
                        "phase" => {
                            let p = expect_symbol(&dargs[0], "a phase")?;
                            phase = Some(Phase::parse(p).ok_or_else(|| syntax(&dargs[0], "unknown phase"))?);
                        }
                        "salience" => match &dargs[0] {
                            Sexp::Atom(Atom::Int(i), _) => salience = *i,
                            other => return Err(syntax(other, "salience must be an integer")),
                        },
                        _ => return Err(syntax(d, format!("unknown declaration `{dname}`"))),
                    }
                }
            }
            "test" => {
                expect_arity(item, args, 1, "test")?;
                conditions.push(Condition::Test(parse_test_expr(&args[0])?));
            }
            "not" => {
                expect_arity(item, args, 1, "not")?;
                let (tname, targs) = head(&args[0], "negated pattern")?;
                conditions.push(Condition::NotExists(parse_pattern(&args[0], tname, targs)?));
            }
            template => conditions.push(Condition::Match(parse_pattern(item, template, args)?)),
        }
    }
    if !seen_arrow {
        return Err(syntax(sexp, format!("rule `{name}` is missing `=>`")));
    }
    let phase = phase.ok_or_else(|| semantic(Some(&name), "missing (declare (phase ...))"))?;
    if !(MIN_SALIENCE as i64..=MAX_SALIENCE as i64).contains(&salience) {
        return Err(semantic(Some(&name), format!("salience {salience} outside [-10000, 10000]")));
    }
    Ok(RuleDef {
        name,
        phase,
        salience: salience as i32,
        conditions,
        actions,
    })
}

// ---------------------------------------------------------------------------
// Semantic checks
// ---------------------------------------------------------------------------

fn reason_vars(reason: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut chars = reason.char_indices().peekable();
    while let Some((_, c)) = chars.next() {
        if c == '?' {
            let mut name = String::new();
            while let Some(&(_, n)) = chars.peek() {
                if n.is_ascii_alphanumeric() || n == '_' || n == '-' {
                    name.push(n);
                    chars.next();
                } else {
                    break;
                }
            }
            if !name.is_empty() {
                out.push(name);
            }
        }
    }
    out
}

fn check_rule(rule: &RuleDef, templates: &[TemplateDef]) -> Result<(), RuleError> {
    let err = |msg: String| semantic(Some(&rule.name), msg);
    if rule.conditions.is_empty() {
        return Err(err("a rule needs at least one condition".into()));
    }
    let mut bound: HashSet<&str> = HashSet::new();
    let mut candidate_patterns = 0;
    let check_pattern = |p: &Pattern| -> Result<(), RuleError> {
        let t = templates
            .iter()
            .find(|t| t.name == p.template)
            .ok_or_else(|| err(format!("unknown template `{}`", p.template)))?;
        for test in &p.tests {
            if t.slot(&test.slot).is_none() {
                return Err(err(format!("template `{}` has no slot `{}`", t.name, test.slot)));
            }
        }
        Ok(())
    };
    for cond in &rule.conditions {
        match cond {
            Condition::Match(p) => {
                check_pattern(p)?;
                if p.template == "candidate-fact" {
                    candidate_patterns += 1;
                }
                for test in &p.tests {
                    if let Term::Var(v) = &test.term {
                        bound.insert(v);
                    }
                }
            }
            Condition::NotExists(p) => check_pattern(p)?,
            Condition::Test(t) => {
                for arg in &t.args {
                    if let Term::Var(v) = arg {
                        if !bound.contains(v.as_str()) {
                            return Err(err(format!("variable ?{v} is used in a test before it is bound")));
                        }
                    }
                }
            }
        }
    }
    if candidate_patterns != 1 {
        return Err(err(format!(
            "a rule must match exactly one candidate-fact pattern, found {candidate_patterns}"
        )));
    }
    if rule.actions.is_empty() {
        return Err(err("a rule needs at least one action".into()));
    }
    let need = |v: &str| -> Result<(), RuleError> {
        if bound.contains(v) {
            Ok(())
        } else {
            Err(err(format!("variable ?{v} is not bound in any condition")))
        }
    };
    for action in &rule.actions {
        match action {
            Action::AssertDecision { action, target, reason } => {
                match action {
                    DecisionAction::Retract | DecisionAction::Promote => {
                        return Err(err(format!(
                            "`{action}` cannot be asserted directly; use bind-retraction"
                        )))
                    }
                    DecisionAction::UpdateValue if target.is_none() => {
                        return Err(err("update_value needs a ?target".into()))
                    }
                    DecisionAction::StoreShortTerm | DecisionAction::StoreLongTerm | DecisionAction::Discard
                        if target.is_some() =>
                    {
                        return Err(err(format!("`{action}` does not take a target")))
                    }
                    _ => {}
                }
                if let Some(t) = target {
                    need(t)?;
                }
                for v in reason_vars(reason) {
                    need(&v)?;
                }
                if reason.trim().is_empty() {
                    return Err(err("decision reasons must not be empty".into()));
                }
            }
            Action::SetCategory(CategoryExpr::OfRelation(v)) => need(v)?,
            Action::SetCategory(CategoryExpr::Literal(_)) => {}
            Action::MarkDuplicate { target, reason } | Action::BindRetraction { target, reason } => {
                need(target)?;
                for v in reason_vars(reason) {
                    need(&v)?;
                }
                if reason.trim().is_empty() {
                    return Err(err("decision reasons must not be empty".into()));
                }
            }
        }
    }
    Ok(())
}

/// Parses and validates a rule pack.
pub fn parse_rule_pack(source: &str) -> Result<RulePack, RuleError> {
    let forms = Reader::new(source).read_all()?;
    let mut templates: Vec<TemplateDef> = Vec::new();
    let mut rules: Vec<RuleDef> = Vec::new();
    let mut policy: Option<PolicyDraft> = None;
    for form in &forms {
        let (kw, rest) = head(form, "top-level form")?;
        match kw {
            "deftemplate" => templates.push(parse_template(form, rest)?),
            "defrule" => rules.push(parse_rule(form, rest)?),
            "defpolicy" => {
                if policy.is_some() {
                    return Err(semantic(None, "only one defpolicy is allowed"));
                }
                policy = Some(parse_policy(rest)?);
            }
            _ => return Err(syntax(form, format!("unknown top-level form `{kw}`"))),
        }
    }

    let mut names = HashSet::new();
    for t in &templates {
        if !names.insert(t.name.as_str()) {
            return Err(semantic(None, format!("duplicate template `{}`", t.name)));
        }
        let mut slots = HashSet::new();
        for s in &t.slots {
            if !slots.insert(s.name.as_str()) {
                return Err(semantic(None, format!("template `{}` declares slot `{}` twice", t.name, s.name)));
            }
        }
    }
    let missing: Vec<&str> = BUILTIN_TEMPLATES
        .iter()
        .copied()
        .filter(|b| !names.contains(b))
        .collect();
    if !missing.is_empty() {
        return Err(semantic(None, format!("missing built-in templates: {}", missing.join(", "))));
    }

    let mut rule_names = HashSet::new();
    for r in &rules {
        if !rule_names.insert(r.name.as_str()) {
            return Err(semantic(Some(&r.name), "duplicate rule name"));
        }
        check_rule(r, &templates)?;
    }

    let policy = match policy {
        None => RelationPolicy::default(),
        Some(draft) => {
            let mut p = draft.policy;
            if !draft.declared_map {
                p.category_map = RelationPolicy::default().category_map;
            }
            if p.category_map.last() != Some(&(RelationPattern::Any, Category::Other)) {
                return Err(semantic(None, "category-map must end with the catch-all (* other)"));
            }
            if p.category_map[..p.category_map.len() - 1]
                .iter()
                .any(|(pat, _)| *pat == RelationPattern::Any)
            {
                return Err(semantic(None, "catch-all (* ...) may only appear as the last category-map entry"));
            }
            p
        }
    };

    Ok(RulePack { templates, rules, policy })
}
