//! Rebuilds `tests/fixtures` from the notebook definitions below.
//!
//! Outcomes for the taxonomy corpus, the def-use suite, the infinite-loop
//! notebook and the random-forest notebook are recorded by running the cells in
//! a real interpreter through `tests/support/stub_driver.py`. The
//! Dinosaurus Island notebook depends on packages that the offline catalogue
//! only pretends to install, so its outcomes are written by hand. Model replies
//! are stored by running the restorer in record mode against a fixed responder.
//!
//!     cargo run -p nbrestore --example regen_fixtures

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nbrestore::classify::{extract_undefined_name, TriageTable};
use nbrestore::harness::{
    execute_notebook, prepare_sandbox, DriverExecutor, ExecutionLimits, IndexProvisioner, RecordedOutcome,
    ReplayExecutor, ReplayRecord, Requirements, SandboxEnv,
};
use nbrestore::llm::{
    render, CompletionRequest, Context, LlmClient, LlmReply, LlmSettings, Payload, ReplayStore, Template, Transport,
    TransportError,
};
use nbrestore::notebook::{code_cells, insert_cell, write_notebook, CellKind, Notebook};
use nbrestore::restore::{FinalStatus, RestorePolicy, Restorer};
use serde_json::json;

#[derive(Clone, Copy)]
enum C {
    Code(&'static str),
    Md(&'static str),
}

fn write_nb(path: &Path, cells: &[C]) -> Notebook {
    let spec: Vec<(CellKind, &str)> = cells
        .iter()
        .map(|c| match c {
            C::Code(s) => (CellKind::Code, *s),
            C::Md(s) => (CellKind::Markdown, *s),
        })
        .collect();
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    fs::write(path, write_notebook(&Notebook::from_cells(path, &spec))).unwrap();
    Notebook::read(path).unwrap()
}

fn code(cells: &[&'static str]) -> Vec<C> {
    cells.iter().map(|s| C::Code(s)).collect()
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    fs::create_dir_all(path.parent().unwrap()).unwrap();
    let mut text = serde_json::to_string_pretty(value).unwrap();
    text.push('\n');
    fs::write(path, text).unwrap();
}

fn record(
    driver: &DriverExecutor,
    base: &Path,
    nb: &Notebook,
    limits: &ExecutionLimits,
    requires: Requirements,
) -> ReplayRecord {
    let report = execute_notebook(nb, &SandboxEnv::detached(), limits, driver).unwrap();
    let rel = nb.path.strip_prefix(base).unwrap().to_path_buf();
    ReplayRecord::from_report(rel, nb, requires, &report)
}

fn taxonomy_corpus() -> Vec<(&'static str, Vec<C>, &'static str)> {
    vec![
        ("exec_arithmetic", code(&["x = 2", "y = x * 21", "assert y == 42"]), "Executable"),
        (
            "exec_functions",
            code(&[
                "def area(r):\n    import math\n    return math.pi * r ** 2",
                "sizes = [area(r) for r in range(5)]",
                "total = sum(sizes)\nprint(round(total, 2))",
            ]),
            "Executable",
        ),
        (
            "exec_with_markdown",
            vec![
                C::Md("# Settings\nParse the run configuration."),
                C::Code("import json\ncfg = json.loads('{\"k\": [1, 2]}')"),
                C::Md("Extend the list."),
                C::Code("cfg['k'].append(3)\nlen(cfg['k'])"),
            ],
            "Executable",
        ),
        (
            "module_first_cell",
            code(&["import dl_course_utils as dcu", "dcu.plot_history()"]),
            "ModuleNotFound",
        ),
        (
            "module_from_import",
            code(&["import os", "from kaggle_helpers_private.models import Net", "net = Net()"]),
            "ModuleNotFound",
        ),
        (
            "module_late",
            code(&["data = [3, 1, 2]", "data.sort()", "import labtools_internal\nlabtools_internal.plot(data)"]),
            "ModuleNotFound",
        ),
        (
            "file_read_csv",
            code(&["import csv", "with open('data/train.csv') as f:\n    rows = list(csv.reader(f))", "len(rows)"]),
            "FileNotFound",
        ),
        (
            "file_write_dir",
            code(&["results = {'acc': 0.91}", "with open('outputs/metrics.txt', 'w') as f:\n    f.write(str(results))"]),
            "FileNotFound",
        ),
        (
            "file_json_config",
            code(&["import json", "config = json.load(open('config.json'))", "config['lr']"]),
            "FileNotFound",
        ),
        ("name_undefined", code(&["scores = [0.5, 0.7]", "print(mean(scores))"]), "NameError"),
        (
            "name_define_after_use",
            code(&["result = normalize([1, 2, 3])", "def normalize(v):\n    s = sum(v)\n    return [x / s for x in v]"]),
            "NameError",
        ),
        ("name_deleted", code(&["buffer = [1, 2]", "del buffer", "buffer.append(3)"]), "NameError"),
        ("stdin_input", code(&["name = input('Your name: ')", "print(name)"]), "StdinNotImplemented"),
        ("stdin_readline", code(&["import sys", "answer = sys.stdin.readline()"]), "StdinNotImplemented"),
        ("timeout_busy_loop", code(&["i = 0", "while True:\n    i += 1"]), "Timeout"),
        ("timeout_sleep", code(&["import time", "time.sleep(3600)"]), "Timeout"),
        ("import_removed_alias", code(&["from collections import Mapping"]), "ImportError"),
        ("import_missing_name", code(&["import os", "from os.path import joinpath"]), "ImportError"),
        ("attribute_str", code(&["s = 'abc'", "s.append('d')"]), "Attribute"),
        ("attribute_module", code(&["import math", "math.tau2"]), "Attribute"),
        ("value_int_parse", code(&["int('twelve')"]), "Value"),
        ("value_unpack", code(&["a, b = [1, 2, 3]"]), "Value"),
        (
            "value_ten_of_thirteen",
            code(&[
                "import statistics",
                "readings = ['3.1', '2.9', '3.4', 'n/a', '3.0']",
                "clean = [r for r in readings if r != 'n/a']",
                "values = [float(r) for r in clean]",
                "mean = statistics.mean(values)",
                "spread = statistics.pstdev(values)",
                "scaled = [(v - mean) / spread for v in values]",
                "peak = max(scaled)",
                "summary = {'mean': mean, 'peak': peak}",
                "print(summary)",
                "values = [float(r) for r in readings]",
                "print(statistics.median(values))",
                "print('done')",
            ]),
            "Value",
        ),
        ("type_concat", code(&["count = 3", "msg = 'items: ' + count"]), "Type"),
        ("type_len", code(&["len(5)"]), "Type"),
        ("key_dict", code(&["prices = {'apple': 1.2}", "prices['pear']"]), "Key"),
        (
            "key_environ",
            code(&["import os", "token = os.environ['NBRESTORE_FIXTURE_UNSET_TOKEN']"]),
            "Key",
        ),
        ("index_list", code(&["items = []", "first = items[0]"]), "Index"),
        ("index_str", code(&["word = 'abc'", "word[10]"]), "Index"),
        ("syntax_bad_def", code(&["x = 1", "def f(:\n    pass"]), "Syntax"),
        ("syntax_indent", code(&["for i in range(3):\nprint(i)"]), "Syntax"),
        ("other_zero_division", code(&["total = 10", "share = total / 0"]), "Other(ZeroDivisionError)"),
        ("other_assertion", code(&["assert 1 + 1 == 3, 'math is broken'"]), "Other(AssertionError)"),
        ("other_recursion", code(&["def f(n):\n    return f(n + 1)", "f(0)"]), "Other(RecursionError)"),
        ("other_crash", code(&["import os", "os._exit(3)"]), "Other(ExecutorCrash)"),
    ]
}

fn taxonomy(dir: &Path, driver: &DriverExecutor) {
    let triage = TriageTable::builtin();
    let limits = ExecutionLimits::with_timeout(Duration::from_secs(3));
    let mut labels = BTreeMap::new();
    let mut records = Vec::new();
    for (name, cells, label) in taxonomy_corpus() {
        let nb = write_nb(&dir.join(format!("{name}.ipynb")), &cells);
        let rec = record(driver, dir, &nb, &limits, Requirements::default());
        let replayed = execute_notebook(
            &nb,
            &SandboxEnv::detached(),
            &limits,
            &ReplayExecutor::from_records(vec![rec.clone()]),
        )
        .unwrap();
        let got = triage.classify(replayed.first_error.as_ref());
        assert_eq!(got.to_string(), label, "{name} recorded as {:?}", replayed.first_error);
        let verdict = triage.triage(&got);
        labels.insert(name, json!({ "category": label, "triage": verdict }));
        records.push(rec);
    }
    write_json(&dir.join("labels.json"), &labels);
    write_json(&dir.join("traces/taxonomy.trace.json"), &records);
    println!("taxonomy: {} notebooks", records.len());
}

fn defuse_suite() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("assign_chain", vec!["a = 1", "b = a + 1", "c = a + b"]),
        ("assign_missing", vec!["a = 1", "c = a + b"]),
        ("tuple_unpack", vec!["x, (y, z) = 1, (2, 3)", "print(x + y + z)"]),
        ("star_unpack", vec!["first, *rest = [1, 2, 3]", "print(first, rest)"]),
        ("annotated_assign", vec!["count: int = 3", "print(count)"]),
        ("annotation_only", vec!["total: int", "print(total)"]),
        ("augassign_undefined", vec!["counter += 1"]),
        ("import_alias", vec!["import collections as col", "col.Counter('aab')"]),
        ("import_alias_hides_name", vec!["import collections as col", "collections.Counter('aab')"]),
        ("from_import_alias", vec!["from math import sqrt as root", "print(root(4))", "print(sqrt(9))"]),
        ("dotted_import", vec!["import os.path", "print(os.sep)"]),
        ("import_inside_function", vec!["def load():\n    import json\n    return json.dumps({})", "load()", "json.dumps([])"]),
        ("comprehension_leak", vec!["squares = [i * i for i in range(3)]", "print(i)"]),
        ("comprehension_reads_global", vec!["n = 3", "vals = [n * k for k in range(n)]", "print(vals)"]),
        ("generator_leak", vec!["total = sum(v for v in range(4))", "v"]),
        ("dict_comprehension_leak", vec!["m = {k: k ** 2 for k in range(3)}", "print(k)"]),
        ("class_scope_in_comprehension", vec!["class Config:\n    rate = 0.1\n    scaled = [rate * i for i in range(2)]"]),
        ("del_then_use", vec!["tmp = 5", "del tmp", "print(tmp)"]),
        ("del_then_redefine", vec!["tmp = 5", "del tmp\ntmp = 6", "print(tmp)"]),
        ("del_same_cell", vec!["z = 1\ndel z\nprint(z)"]),
        ("global_via_call", vec!["def setup():\n    global config\n    config = {'lr': 0.1}", "setup()", "print(config['lr'])"]),
        ("global_never_called", vec!["def setup():\n    global config\n    config = {}", "print(config)"]),
        ("for_target", vec!["for idx in range(3):\n    pass", "print(idx)"]),
        ("with_target", vec!["import io\nwith io.StringIO('x') as fh:\n    text = fh.read()", "print(text, fh.closed)"]),
        ("except_alias_unbound", vec!["try:\n    1 / 0\nexcept ZeroDivisionError as err:\n    msg = str(err)", "print(msg)", "print(err)"]),
        ("walrus", vec!["if (n := 10) > 5:\n    pass", "print(n)"]),
        ("define_after_use", vec!["print(helper())", "def helper():\n    return 1"]),
        ("function_reads_later_global", vec!["def show():\n    return label", "label = 'ok'", "show()"]),
        ("function_called_before_global", vec!["def show():\n    return label", "show()", "label = 'late'"]),
        ("lambda_free_name", vec!["scale = lambda v: v * factor", "factor = 2", "scale(3)"]),
        ("closure", vec!["def outer():\n    base = 10\n    def inner(x):\n        return base + x\n    return inner", "f = outer()\nprint(f(1))"]),
        ("class_methods", vec!["class Point:\n    dims = 2\n    def norm(self):\n        return self.dims", "p = Point()\nprint(p.norm())"]),
        ("builtins_only", vec!["print(len(range(3)), sorted([2, 1]))"]),
        ("typo_in_call", vec!["values = [1, 2]", "print(max(values), min(vals))"]),
    ]
}

fn defuse(dir: &Path, driver: &DriverExecutor) {
    let limits = ExecutionLimits::with_timeout(Duration::from_secs(10));
    let mut oracle = BTreeMap::new();
    for (name, cells) in defuse_suite() {
        let nb = write_nb(&dir.join(format!("{name}.ipynb")), &code(&cells));
        let report = execute_notebook(&nb, &SandboxEnv::detached(), &limits, driver).unwrap();
        let entry = match &report.first_error {
            None => serde_json::Value::Null,
            Some(ev) if ev.ename == "NameError" => {
                json!({ "cell": ev.cell_index, "name": extract_undefined_name(ev).unwrap() })
            }
            Some(ev) => panic!("{name}: unexpected {}: {}", ev.ename, ev.evalue),
        };
        oracle.insert(name, entry);
    }
    write_json(&dir.join("oracle.json"), &oracle);
    println!("def-use: {} notebooks", oracle.len());
}

fn infinite_loop(dir: &Path, driver: &DriverExecutor) {
    let nb = write_nb(
        &dir.join("infinite_loop.ipynb"),
        &[
            C::Code("import time\nstarted = time.time()"),
            C::Md("Poll until the job reports completion."),
            C::Code("while True:\n    pass"),
            C::Code("print('finished after', time.time() - started)"),
        ],
    );
    let limits = ExecutionLimits::with_timeout(Duration::from_secs(3));
    let rec = record(driver, dir, &nb, &limits, Requirements::default());
    assert!(matches!(rec.outcomes.last().unwrap().outcome, RecordedOutcome::Hang));
    write_json(&dir.join("traces/infinite_loop.trace.json"), &vec![rec]);
}

const RANDOM_FOREST: &[&str] = &[
    "import csv\nimport math\nimport random\nfrom collections import Counter",
    "with open('Social_Network_Ads.csv') as f:\n    rows = list(csv.DictReader(f))\nlen(rows)",
    "rows[:5]",
    "features = ['Age', 'EstimatedSalary']\nX = [[float(r[c]) for c in features] for r in rows]\ny = [int(r['Purchased']) for r in rows]",
    "Counter(y)",
    "random.seed(0)\nidx = list(range(len(X)))\nrandom.shuffle(idx)\nsplit = int(0.75 * len(idx))\ntrain_idx, test_idx = idx[:split], idx[split:]",
    "X_train = [X[i] for i in train_idx]\ny_train = [y[i] for i in train_idx]\nX_test = [X[i] for i in test_idx]\ny_test = [y[i] for i in test_idx]",
    "def column_stats(data, j):\n    col = [row[j] for row in data]\n    mean = sum(col) / len(col)\n    var = sum((v - mean) ** 2 for v in col) / len(col)\n    return mean, math.sqrt(var) or 1.0",
    "stats = [column_stats(X_train, j) for j in range(len(features))]\n\ndef scale(data):\n    return [[(v - stats[j][0]) / stats[j][1] for j, v in enumerate(row)] for row in data]",
    "X_train_s = scale(X_train)\nX_test_s = scale(X_test)",
    "def gini(labels):\n    n = len(labels)\n    if n == 0:\n        return 0.0\n    return 1.0 - sum((c / n) ** 2 for c in Counter(labels).values())",
    "def best_split(data, labels, feature_ids):\n    best = (None, None, gini(labels))\n    for j in feature_ids:\n        for t in sorted(set(row[j] for row in data)):\n            left = [l for row, l in zip(data, labels) if row[j] <= t]\n            right = [l for row, l in zip(data, labels) if row[j] > t]\n            if not left or not right:\n                continue\n            score = (len(left) * gini(left) + len(right) * gini(right)) / len(labels)\n            if score < best[2]:\n                best = (j, t, score)\n    return best",
    "def build_tree(data, labels, depth, max_depth, n_features, rng):\n    if depth >= max_depth or len(set(labels)) == 1:\n        return Counter(labels).most_common(1)[0][0]\n    feature_ids = rng.sample(range(len(data[0])), n_features)\n    j, t, _ = best_split(data, labels, feature_ids)\n    if j is None:\n        return Counter(labels).most_common(1)[0][0]\n    left = [(row, l) for row, l in zip(data, labels) if row[j] <= t]\n    right = [(row, l) for row, l in zip(data, labels) if row[j] > t]\n    return (j, t,\n            build_tree([r for r, _ in left], [l for _, l in left], depth + 1, max_depth, n_features, rng),\n            build_tree([r for r, _ in right], [l for _, l in right], depth + 1, max_depth, n_features, rng))",
    "def predict_tree(node, row):\n    while isinstance(node, tuple):\n        j, t, left, right = node\n        node = left if row[j] <= t else right\n    return node",
    "def bootstrap(data, labels, rng):\n    picks = [rng.randrange(len(data)) for _ in data]\n    return [data[i] for i in picks], [labels[i] for i in picks]",
    "class RandomForest:\n    def __init__(self, n_trees=10, max_depth=4, n_features=1, seed=0):\n        self.n_trees = n_trees\n        self.max_depth = max_depth\n        self.n_features = n_features\n        self.rng = random.Random(seed)\n        self.trees = []\n\n    def fit(self, data, labels):\n        for _ in range(self.n_trees):\n            d, l = bootstrap(data, labels, self.rng)\n            self.trees.append(build_tree(d, l, 0, self.max_depth, self.n_features, self.rng))\n        return self\n\n    def predict(self, data):\n        return [Counter(predict_tree(t, row) for t in self.trees).most_common(1)[0][0] for row in data]",
    "forest = RandomForest(n_trees=10, max_depth=4, n_features=1, seed=42)\nforest.fit(X_train_s, y_train)",
    "y_pred = forest.predict(X_test_s)",
    "def confusion_matrix(actual, predicted):\n    m = [[0, 0], [0, 0]]\n    for a, p in zip(actual, predicted):\n        m[a][p] += 1\n    return m\n\ncm = confusion_matrix(y_test, y_pred)\ncm",
    "accuracy = sum(a == p for a, p in zip(y_test, y_pred)) / len(y_test)\nprint(f'Accuracy: {accuracy:.2f}')",
    "tp, fp, fn = cm[1][1], cm[0][1], cm[1][0]\nprecision = tp / (tp + fp) if tp + fp else 0.0\nrecall = tp / (tp + fn) if tp + fn else 0.0\nprint(f'Precision: {precision:.2f}  Recall: {recall:.2f}')",
    "importance = Counter()\n\ndef count_splits(node):\n    if isinstance(node, tuple):\n        importance[features[node[0]]] += 1\n        count_splits(node[2])\n        count_splits(node[3])\n\nfor tree in forest.trees:\n    count_splits(tree)\nimportance",
    "sample = scale([[35.0, 60000.0], [52.0, 120000.0]])\nforest.predict(sample)",
    "print('Trees:', len(forest.trees), 'Test rows:', len(y_test))",
];

fn social_network_ads() -> String {
    let mut out = String::from("User ID,Gender,Age,EstimatedSalary,Purchased\n");
    for i in 0..40u32 {
        let age = 18 + (i * 7) % 42;
        let salary = 15000 + (i * 9137) % 135000;
        let purchased = u32::from(age >= 42 || salary >= 100000);
        let gender = if i % 2 == 0 { "Male" } else { "Female" };
        out.push_str(&format!("{},{gender},{age},{salary},{purchased}\n", 15624510 + i * 1013));
    }
    out
}

const DINOSAURUS: &[C] = &[
    C::Md("# Character level language model - Dinosaurus Island\n\nWelcome to Dinosaurus Island! 65 million years ago, dinosaurs existed."),
    C::Code("import numpy as np\nfrom utils import *\nimport random\nimport pprint"),
    C::Md("## 1 - Problem Statement\n\n### 1.1 - Dataset and Preprocessing"),
    C::Code("data = open('dinos.txt', 'r').read()\ndata = data.lower()\nchars = list(set(data))\ndata_size, vocab_size = len(data), len(chars)\nprint('There are %d total characters and %d unique characters in your data.' % (data_size, vocab_size))"),
    C::Code("chars = sorted(chars)\nchar_to_ix = { ch:i for i,ch in enumerate(chars) }\nix_to_char = { i:ch for i,ch in enumerate(chars) }\npp = pprint.PrettyPrinter(indent=4)\npp.pprint(ix_to_char)"),
    C::Md("## 2 - Building blocks of the model\n\n### 2.1 - Clipping the gradients in the optimization loop"),
    C::Code("def clip(gradients, maxValue):\n    dWaa, dWax, dWya, db, dby = gradients['dWaa'], gradients['dWax'], gradients['dWya'], gradients['db'], gradients['dby']\n    for gradient in [dWax, dWaa, dWya, db, dby]:\n        np.clip(gradient, -maxValue, maxValue, out=gradient)\n    gradients = {\"dWaa\": dWaa, \"dWax\": dWax, \"dWya\": dWya, \"db\": db, \"dby\": dby}\n    return gradients"),
    C::Code("np.random.seed(3)\ndWax = np.random.randn(5,3)*10\ndWaa = np.random.randn(5,5)*10\ndWya = np.random.randn(2,5)*10\ndb = np.random.randn(5,1)*10\ndby = np.random.randn(2,1)*10\ngradients = {\"dWax\": dWax, \"dWaa\": dWaa, \"dWya\": dWya, \"db\": db, \"dby\": dby}\ngradients = clip(gradients, 10)\nprint(\"gradients[\\\"dWaa\\\"][1][2] =\", gradients[\"dWaa\"][1][2])"),
    C::Md("### 2.2 - Sampling\n\nThe `softmax` function is provided for you in `utils`."),
    C::Code("def sample(parameters, char_to_ix, seed):\n    Waa, Wax, Wya, by, b = parameters['Waa'], parameters['Wax'], parameters['Wya'], parameters['by'], parameters['b']\n    vocab_size = by.shape[0]\n    n_a = Waa.shape[1]\n    x = np.zeros((vocab_size, 1))\n    a_prev = np.zeros((n_a, 1))\n    indices = []\n    idx = -1\n    counter = 0\n    newline_character = char_to_ix['\\n']\n    while (idx != newline_character and counter != 50):\n        a = np.tanh(np.dot(Wax, x) + np.dot(Waa, a_prev) + b)\n        z = np.dot(Wya, a) + by\n        y = softmax(z)\n        np.random.seed(counter + seed)\n        idx = np.random.choice(list(range(vocab_size)), p=y.ravel())\n        indices.append(idx)\n        x = np.zeros((vocab_size, 1))\n        x[idx] = 1\n        a_prev = a\n        seed += 1\n        counter += 1\n    if (counter == 50):\n        indices.append(char_to_ix['\\n'])\n    return indices\n\nnp.random.seed(2)\n_, n_a = 20, 100\nWax, Waa, Wya = np.random.randn(n_a, vocab_size), np.random.randn(n_a, n_a), np.random.randn(vocab_size, n_a)\nb, by = np.random.randn(n_a, 1), np.random.randn(vocab_size, 1)\nparameters = {\"Wax\": Wax, \"Waa\": Waa, \"Wya\": Wya, \"b\": b, \"by\": by}\nindices = sample(parameters, char_to_ix, 0)\nprint(\"Sampling:\")\nprint(\"list of sampled indices:\", indices)\nprint(\"list of sampled characters:\", [ix_to_char[i] for i in indices])"),
    C::Md("## 3 - Building the language model\n\n### 3.1 - Gradient descent"),
    C::Code("def optimize(X, Y, a_prev, parameters, learning_rate = 0.01):\n    loss, cache = rnn_forward(X, Y, a_prev, parameters)\n    gradients, a = rnn_backward(X, Y, parameters, cache)\n    gradients = clip(gradients, 5)\n    parameters = update_parameters(parameters, gradients, learning_rate)\n    return loss, gradients, a[len(X)-1]"),
    C::Code("np.random.seed(1)\nvocab_size, n_a = 27, 100\na_prev = np.random.randn(n_a, 1)\nWax, Waa, Wya = np.random.randn(n_a, vocab_size), np.random.randn(n_a, n_a), np.random.randn(vocab_size, n_a)\nb, by = np.random.randn(n_a, 1), np.random.randn(vocab_size, 1)\nparameters = {\"Wax\": Wax, \"Waa\": Waa, \"Wya\": Wya, \"b\": b, \"by\": by}\nX = [12,3,5,11,22,3]\nY = [4,14,11,22,25, 26]\nloss, gradients, a_last = optimize(X, Y, a_prev, parameters, learning_rate = 0.01)\nprint(\"Loss =\", np.asscalar(loss))\nprint(\"gradients[\\\"dWaa\\\"][1][2] =\", gradients[\"dWaa\"][1][2])"),
    C::Md("### 3.2 - Training the model"),
    C::Code("def model(data, ix_to_char, char_to_ix, num_iterations = 35000, n_a = 50, dino_names = 7, vocab_size = 27):\n    n_x, n_y = vocab_size, vocab_size\n    parameters = initialize_parameters(n_a, n_x, n_y)\n    loss = get_initial_loss(vocab_size, dino_names)\n    with open(\"dinos.txt\") as f:\n        examples = f.readlines()\n    examples = [x.lower().strip() for x in examples]\n    np.random.seed(0)\n    np.random.shuffle(examples)\n    a_prev = np.zeros((n_a, 1))\n    for j in range(num_iterations):\n        index = j % len(examples)\n        X = [None] + [char_to_ix[ch] for ch in examples[index]]\n        Y = X[1:] + [char_to_ix[\"\\n\"]]\n        curr_loss, gradients, a_prev = optimize(X, Y, a_prev, parameters, learning_rate = 0.01)\n        loss = smooth(loss, curr_loss)\n        if j % 2000 == 0:\n            print('Iteration: %d, Loss: %f' % (j, loss) + '\\n')\n            seed = 0\n            for name in range(dino_names):\n                sampled_indices = sample(parameters, char_to_ix, seed)\n                print_sample(sampled_indices, ix_to_char)\n                seed += 1\n            print('\\n')\n    return parameters"),
    C::Code("parameters = model(data, ix_to_char, char_to_ix)"),
    C::Md("## 4 - Writing like Shakespeare"),
    C::Code("from keras.callbacks import LambdaCallback\nfrom keras.models import Model, load_model, Sequential\nfrom shakespeare_utils import *\nimport sys\nimport io"),
    C::Code("print_callback = LambdaCallback(on_epoch_end=on_epoch_end)\nmodel.fit(x, y, batch_size=128, epochs=1, callbacks=[print_callback])"),
    C::Code("generate_output()"),
    C::Code("indices = sample(parameters, char_to_ix, 7)\nprint(''.join(ix_to_char[i] for i in indices))"),
];

const DINOS_TXT: &str = "aachenosaurus\naardonyx\nabdallahsaurus\nabelisaurus\nabrictosaurus\nabrosaurus\nabydosaurus\nacanthopholis\nachelousaurus\nacheroraptor\n";

const SOFTMAX_REPLY: &str = "The notebook calls `softmax` on the logits `z` of shape (vocab_size, 1) and \
expects a probability column vector back. Here is a definition:\n\n```python\nimport tensorflow as tf\n\n\n\
def softmax(x):\n    \"\"\"Column-wise softmax of a score vector.\"\"\"\n    return tf.nn.softmax(x, axis=0).numpy()\n```\n\n\
It returns a NumPy array so that `y.ravel()` keeps working.\n";

fn csv_reply() -> String {
    format!(
        "Here is a synthetic `Social_Network_Ads.csv` with the columns the notebook reads:\n\n```csv\n{}```\n\n\
         `Purchased` is a binary label and `Age` and `EstimatedSalary` are numeric.\n",
        social_network_ads()
    )
}

struct FixedModel;

impl Transport for FixedModel {
    fn complete(&self, request: &CompletionRequest) -> Result<String, TransportError> {
        if request.prompt.contains("Missing file: Social_Network_Ads.csv") {
            Ok(csv_reply())
        } else if request.prompt.contains("Definition search for `softmax`") {
            Ok(SOFTMAX_REPLY.to_string())
        } else {
            Err(TransportError::Fatal(format!("no fixture reply for prompt:\n{}", request.prompt)))
        }
    }
}

fn softmax_source() -> String {
    let ctx: Context = ["script", "ename", "evalue", "name", "error_cell", "def_location"]
        .iter()
        .map(|k| (k.to_string(), if *k == "name" { "softmax".into() } else { String::new() }))
        .collect();
    let spec = render(Template::NameDefinition, &ctx).unwrap();
    match LlmReply::parse(&spec, SOFTMAX_REPLY.to_string()).payload {
        Some(Payload::Definition { source }) => source.trim_end_matches('\n').to_string(),
        other => panic!("softmax reply does not parse: {other:?}"),
    }
}

fn error(ename: &str, evalue: &str, traceback: &[&str]) -> RecordedOutcome {
    RecordedOutcome::Error {
        ename: ename.into(),
        evalue: evalue.into(),
        traceback: traceback.iter().map(|s| s.to_string()).collect(),
    }
}

fn dinosaurus_records(base: &Path, nb: &Notebook) -> Vec<ReplayRecord> {
    let rel = nb.path.strip_prefix(base).unwrap().to_path_buf();
    let code: Vec<usize> = code_cells(nb).map(|c| c.index).collect();
    assert_eq!(code.len(), 14);
    let ok = |cells: &[usize]| cells.iter().map(|&i| (i, RecordedOutcome::Ok)).collect::<Vec<_>>();
    let make = |nb: &Notebook, modules: &[&str], outcomes: Vec<(usize, RecordedOutcome)>| {
        let mut rec = ReplayRecord {
            notebook: rel.clone(),
            content_hash: nb.content_hash(),
            requires: Requirements {
                files: vec!["dinos.txt".into()],
                modules: modules.iter().map(|s| s.to_string()).collect(),
            },
            outcomes: Vec::new(),
        };
        rec.outcomes = serde_json::from_value(json!(outcomes
            .into_iter()
            .map(|(i, o)| {
                let mut v = serde_json::to_value(o).unwrap();
                v["cell_index"] = json!(i);
                v
            })
            .collect::<Vec<_>>()))
        .unwrap();
        rec
    };

    let missing_utils = error(
        "ModuleNotFoundError",
        "No module named 'utils'",
        &[
            "---------------------------------------------------------------------------",
            "ModuleNotFoundError                       Traceback (most recent call last)",
            "Cell In[1], line 2\n      1 import numpy as np\n----> 2 from utils import *\n      3 import random\n      4 import pprint\n",
            "ModuleNotFoundError: No module named 'utils'",
        ],
    );
    let mut first = ok(&[]);
    first.push((code[0], missing_utils));

    let no_softmax = error(
        "NameError",
        "name 'softmax' is not defined",
        &[
            "---------------------------------------------------------------------------",
            "NameError                                 Traceback (most recent call last)",
            "Cell In[6], line 36\n     34 b, by = np.random.randn(n_a, 1), np.random.randn(vocab_size, 1)\n     35 parameters = {\"Wax\": Wax, \"Waa\": Waa, \"Wya\": Wya, \"b\": b, \"by\": by}\n---> 36 indices = sample(parameters, char_to_ix, 0)\n",
            "Cell In[6], line 14, in sample(parameters, char_to_ix, seed)\n     12 a = np.tanh(np.dot(Wax, x) + np.dot(Waa, a_prev) + b)\n     13 z = np.dot(Wya, a) + by\n---> 14 y = softmax(z)\n",
            "NameError: name 'softmax' is not defined",
        ],
    );
    let mut second = ok(&code[..5]);
    second.push((code[5], no_softmax));

    let with_def = insert_cell(nb, code[5], &softmax_source()).unwrap();
    let code2: Vec<usize> = code_cells(&with_def).map(|c| c.index).collect();
    let asscalar = error(
        "AttributeError",
        "module 'numpy' has no attribute 'asscalar'",
        &[
            "---------------------------------------------------------------------------",
            "AttributeError                            Traceback (most recent call last)",
            "Cell In[9], line 10\n      8 Y = [4,14,11,22,25, 26]\n      9 loss, gradients, a_last = optimize(X, Y, a_prev, parameters, learning_rate = 0.01)\n---> 10 print(\"Loss =\", np.asscalar(loss))\n",
            "AttributeError: module 'numpy' has no attribute 'asscalar'",
        ],
    );
    let mut third = ok(&code2[..8]);
    third.push((code2[8], asscalar));

    vec![
        make(nb, &[], first),
        make(nb, &["utils"], second),
        make(&with_def, &["utils", "tensorflow"], third),
    ]
}

fn copy_dir(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let dest = to.join(entry.path().strip_prefix(from).unwrap());
        if entry.file_type().is_dir() {
            fs::create_dir_all(&dest).unwrap();
        } else {
            fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

fn replay(dir: &Path, driver: &DriverExecutor) {
    write_json(
        &dir.join("packages.json"),
        &json!({ "packages": {
            "numpy": { "versions": ["1.26.4"] },
            "utils": { "versions": ["1.0.2"] },
            "tensorflow": { "versions": ["2.15.0", "2.16.1"] },
            "pandas": { "versions": ["2.2.2"] },
        }}),
    );

    let rf = write_nb(&dir.join("random_forest/random_forest_algorithm.ipynb"), &code(RANDOM_FOREST));
    let limits = ExecutionLimits::with_timeout(Duration::from_secs(60));
    let without = record(driver, dir, &rf, &limits, Requirements::default());
    let csv_path = dir.join("random_forest/Social_Network_Ads.csv");
    fs::write(&csv_path, social_network_ads()).unwrap();
    let with = record(
        driver,
        dir,
        &rf,
        &limits,
        Requirements {
            files: vec!["Social_Network_Ads.csv".into()],
            modules: vec![],
        },
    );
    fs::remove_file(&csv_path).unwrap();
    assert_eq!(with.outcomes.len(), 24, "{:?}", with.outcomes.last());
    assert!(with.outcomes.iter().all(|c| c.outcome == RecordedOutcome::Ok));

    let dino_dir = dir.join("deep-learning-coursera");
    let dino = write_nb(&dino_dir.join("DinosaurusIsland--Character level language model final-v3.ipynb"), DINOSAURUS);
    fs::write(dino_dir.join("dinos.txt"), DINOS_TXT).unwrap();
    fs::write(dino_dir.join("requirements.txt"), "numpy\n").unwrap();

    let mut records = vec![without, with];
    records.extend(dinosaurus_records(dir, &dino));
    write_json(&dir.join("traces/notebooks.trace.json"), &records);

    let store_dir = dir.join("llm");
    if store_dir.exists() {
        fs::remove_dir_all(&store_dir).unwrap();
    }
    let llm = LlmClient::record(LlmSettings::default(), Box::new(FixedModel), ReplayStore::new(&store_dir));
    let executor = ReplayExecutor::from_records(records);
    let provisioner = IndexProvisioner::from_file(&dir.join("packages.json")).unwrap();
    let restorer = Restorer {
        executor: &executor,
        provisioner: &provisioner,
        llm: &llm,
        triage: TriageTable::builtin(),
        limits: ExecutionLimits::default(),
        policy: RestorePolicy::default(),
    };
    let scratch = tempfile::tempdir().unwrap();
    copy_dir(dir, scratch.path());
    for (nb, expected) in [(&rf, FinalStatus::FullyRestored), (&dino, FinalStatus::PartiallyRestored)] {
        let rel = nb.path.strip_prefix(dir).unwrap();
        let copy = Notebook::read(scratch.path().join(rel)).unwrap();
        let project = copy.workdir();
        let sandbox = scratch.path().join("sandbox").join(rel.file_stem().unwrap());
        let mut env = prepare_sandbox(&project, &sandbox, None, &provisioner).unwrap();
        let out = restorer.restore(&copy, &mut env).unwrap();
        assert_eq!(out.trace.final_status, expected, "{}", out.trace.to_json());
        println!(
            "{}: {:?}, {} -> {} of {} cells",
            rel.display(),
            out.trace.final_status,
            out.trace.initial.cells_ok,
            out.trace.final_report.cells_ok,
            out.trace.final_report.total_code_cells
        );
    }
    let written = fs::read_to_string(scratch.path().join("random_forest/Social_Network_Ads.csv")).unwrap();
    assert_eq!(written, social_network_ads());
}

fn main() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let driver = DriverExecutor::new(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/support/stub_driver.py"));
    for sub in ["taxonomy", "defuse", "timeout", "replay"] {
        let d = root.join(sub);
        if d.exists() {
            fs::remove_dir_all(&d).unwrap();
        }
    }
    taxonomy(&root.join("taxonomy"), &driver);
    defuse(&root.join("defuse"), &driver);
    infinite_loop(&root.join("timeout"), &driver);
    replay(&root.join("replay"), &driver);
}
