#include "ofa/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace ofa {

namespace {

const std::vector<std::pair<Task, const char*>>& task_names() {
    static const std::vector<std::pair<Task, const char*>> names = {
        {Task::VG, "vg"},
        {Task::GC, "gc"},
        {Task::ITM, "itm"},
        {Task::Caption, "caption"},
        {Task::VQA, "vqa"},
        {Task::Detection, "detection"},
        {Task::ImageInfill, "image_infill"},
        {Task::TextInfill, "text_infill"},
        {Task::Classify, "classify"},
        {Task::SentPair, "sent_pair"},
        {Task::Summarize, "summarize"},
    };
    return names;
}

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

}  // namespace

std::string task_name(Task t) {
    for (const auto& [task, name] : task_names())
        if (task == t) return name;
    throw UsageError("unknown task enum value");
}

Task task_from_name(const std::string& name) {
    for (const auto& [task, n] : task_names())
        if (name == n) return task;
    throw UsageError("unknown task name '" + name + "'");
}

const char* group_name(TaskGroup g) {
    switch (g) {
        case TaskGroup::VisionLanguage: return "vl";
        case TaskGroup::Detection: return "det";
        case TaskGroup::ImageOnly: return "img";
        case TaskGroup::TextOnly: return "txt";
    }
    return "?";
}

TaskGroup group_of(const TaskRecord& r) {
    switch (r.task) {
        case Task::VG:
        case Task::GC:
        case Task::ITM:
        case Task::Caption:
        case Task::VQA: return TaskGroup::VisionLanguage;
        case Task::Detection: return TaskGroup::Detection;
        case Task::ImageInfill: return TaskGroup::ImageOnly;
        case Task::TextInfill: return TaskGroup::TextOnly;
        case Task::Classify:
            return r.image ? TaskGroup::VisionLanguage : TaskGroup::TextOnly;
        case Task::SentPair:
        case Task::Summarize: return TaskGroup::TextOnly;
    }
    return TaskGroup::TextOnly;
}

void validate_record(const TaskRecord& r) {
    auto need = [&](bool ok, const char* field) {
        if (!ok) {
            throw DataError("task '" + task_name(r.task) + "': missing field '" + field + "'");
        }
    };
    switch (r.task) {
        case Task::VG:
            need(static_cast<bool>(r.image), "image");
            need(!r.text.empty(), "text");
            need(r.boxes.size() == 1, "boxes (exactly one)");
            break;
        case Task::GC:
            need(static_cast<bool>(r.image), "image");
            need(!r.boxes.empty(), "boxes");
            need(!r.text.empty(), "text");
            break;
        case Task::ITM:
            need(static_cast<bool>(r.image), "image");
            need(!r.text.empty(), "text");
            need(!r.label.empty(), "label");
            break;
        case Task::Caption:
            need(static_cast<bool>(r.image), "image");
            need(!r.text.empty(), "text");
            break;
        case Task::VQA:
            need(static_cast<bool>(r.image), "image");
            need(!r.question.empty(), "question");
            need(!r.answer.empty(), "answer");
            break;
        case Task::Detection:
            need(static_cast<bool>(r.image), "image");
            need(!r.boxes.empty(), "boxes");
            for (const auto& b : r.boxes) need(!b.label.empty(), "boxes[].label");
            break;
        case Task::ImageInfill: need(static_cast<bool>(r.image), "image"); break;
        case Task::TextInfill: need(!r.text.empty(), "text"); break;
        case Task::Classify:
            need(!r.label.empty(), "label");
            need(static_cast<bool>(r.image) || !r.text.empty(), "image or text");
            break;
        case Task::SentPair:
            need(!r.text.empty(), "text");
            need(!r.text2.empty(), "text2");
            need(!r.label.empty(), "label");
            break;
        case Task::Summarize:
            need(!r.text.empty(), "text");
            need(!r.text2.empty(), "text2");
            break;
    }
    for (const auto& b : r.boxes) b.box.validate();
}

// ---- templates -----------------------------------------------------------------

TemplateSet TemplateSet::defaults() {
    TemplateSet t;
    t.templates_ = {
        {"vg", "Which region does the text \"{text}\" describe?"},
        {"gc", "What does the region describe? region: {region}"},
        {"itm", "Does the image describe \"{text}\"?"},
        {"caption", "What does the image describe?"},
        {"vqa", "{question}"},
        {"detection", "What are the objects in the image?"},
        {"image_infill", "What is the image in the middle part?"},
        {"text_infill", "{text}"},
        {"classify_image", "What does the image describe?"},
        {"classify_text", "Is the sentiment of text \"{text}\" positive or negative?"},
        {"sent_pair", "Can text1 \"{text}\" imply text2 \"{text2}\"?"},
        {"summarize", "What is the summary of article \"{text}\"?"},
    };
    return t;
}

TemplateSet TemplateSet::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot read template file " + path);
    TemplateSet t = defaults();
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        const size_t tab = line.find('\t');
        if (tab == std::string::npos) throw DataError("template line without tab: " + line);
        const std::string name = line.substr(0, tab);
        if (!t.templates_.count(name)) throw DataError("unknown template name '" + name + "'");
        t.templates_[name] = line.substr(tab + 1);
    }
    return t;
}

void TemplateSet::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    for (const auto& [name, tpl] : templates_) f << name << '\t' << tpl << '\n';
}

const std::string& TemplateSet::get(const std::string& name) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw UsageError("no template named '" + name + "'");
    return it->second;
}

std::string TemplateSet::render(const TaskRecord& r, int num_loc_bins) const {
    std::string key = task_name(r.task);
    if (r.task == Task::Classify) key = r.image ? "classify_image" : "classify_text";
    const std::string& tpl = get(key);

    auto field_value = [&](const std::string& field) -> std::string {
        if (field == "text") return r.text;
        if (field == "text2") return r.text2;
        if (field == "question") return r.question;
        if (field == "label") return r.label;
        if (field == "region") {
            if (r.boxes.empty()) return "";
            const auto bins = box_to_bins(r.boxes[0].box, num_loc_bins);
            std::string s;
            for (size_t i = 0; i < 4; ++i) {
                if (i) s += ' ';
                s += "<loc_" + std::to_string(bins[i]) + ">";
            }
            return s;
        }
        throw UsageError("template '" + key + "': unknown placeholder {" + field + "}");
    };

    std::string out;
    size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            const size_t close = tpl.find('}', i);
            if (close == std::string::npos) throw DataError("template '" + key + "': unbalanced brace");
            const std::string field = tpl.substr(i + 1, close - i - 1);
            const std::string value = field_value(field);
            if (value.empty()) {
                throw DataError("template '" + key + "': missing field '" + field + "'");
            }
            out += value;
            i = close + 1;
        } else {
            out.push_back(tpl[i++]);
        }
    }
    return out;
}

// ---- serialization ---------------------------------------------------------------

std::vector<std::string> task_label_set(Task t) {
    switch (t) {
        case Task::ITM: return {"yes", "no"};
        case Task::SentPair: return {"yes", "no", "maybe"};
        default: return {};
    }
}

namespace {

std::string map_entailment_label(const std::string& raw) {
    const std::string l = lower(raw);
    if (l == "entailment") return "yes";
    if (l == "neutral") return "maybe";
    if (l == "contradiction") return "no";
    return l;
}

// Per-position allowed-token sets along the gold path of a closed label set.
std::vector<std::vector<int>> gold_path_masks(const std::vector<std::vector<int>>& label_seqs,
                                              const std::vector<int>& gold) {
    std::vector<std::vector<int>> masks(gold.size());
    for (size_t t = 0; t < gold.size(); ++t) {
        std::vector<int> allow;
        for (const auto& seq : label_seqs) {
            if (seq.size() <= t) continue;
            if (!std::equal(gold.begin(), gold.begin() + static_cast<long>(t), seq.begin())) continue;
            allow.push_back(seq[t]);
        }
        std::sort(allow.begin(), allow.end());
        allow.erase(std::unique(allow.begin(), allow.end()), allow.end());
        masks[t] = std::move(allow);
    }
    return masks;
}

std::vector<int> encode_label_seq(const UnifiedVocab& v, const std::string& label) {
    std::vector<int> ids = v.encode(label);
    ids.push_back(UnifiedVocab::kEos);
    return ids;
}

}  // namespace

InstructionSample serialize_sample(const TaskRecord& r, const UnifiedVocab& v,
                                   const TemplateSet& templates, const Codebook* cb,
                                   const SerializeOptions& opts, Rng* rng) {
    validate_record(r);
    InstructionSample s;
    s.task = r.task;
    s.group = group_of(r);
    s.patches = r.image;

    std::string instruction = templates.render(r, v.num_loc_bins());
    auto target_text = [&](const std::string& text) {
        s.target_ids = v.encode(text);
        s.target_ids.push_back(UnifiedVocab::kEos);
    };
    auto closed_set_target = [&](const std::string& label) {
        target_text(label);
        if (opts.trie_targets) {
            std::vector<std::vector<int>> seqs;
            for (const auto& l : task_label_set(r.task)) seqs.push_back(encode_label_seq(v, l));
            s.allowed = gold_path_masks(seqs, s.target_ids);
        }
    };

    switch (r.task) {
        case Task::VG: {
            const auto toks = box_to_tokens(r.boxes[0].box, v);
            s.target_ids.assign(toks.begin(), toks.end());
            s.target_ids.push_back(UnifiedVocab::kEos);
            break;
        }
        case Task::GC:
        case Task::Caption:
        case Task::Summarize: target_text(r.task == Task::Summarize ? r.text2 : r.text); break;
        case Task::ITM: closed_set_target(lower(r.label)); break;
        case Task::SentPair: closed_set_target(map_entailment_label(r.label)); break;
        case Task::VQA: target_text(r.answer); break;
        case Task::Classify: target_text(r.label); break;
        case Task::Detection: {
            std::vector<LabeledBox> boxes = r.boxes;
            std::stable_sort(boxes.begin(), boxes.end(), [](const LabeledBox& a, const LabeledBox& b) {
                if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
                return a.box.x1 < b.box.x1;
            });
            for (const auto& lb : boxes) {
                const auto toks = box_to_tokens(lb.box, v);
                s.target_ids.insert(s.target_ids.end(), toks.begin(), toks.end());
                const auto label_ids = v.encode(lb.label);
                s.target_ids.insert(s.target_ids.end(), label_ids.begin(), label_ids.end());
            }
            s.target_ids.push_back(UnifiedVocab::kEos);
            break;
        }
        case Task::ImageInfill: {
            if (!cb) throw DataError("image_infill: codebook required");
            const MaskedImage masked = mask_middle(*r.image, *cb, opts.infill_fraction);
            s.patches = std::make_shared<ImageGrid>(masked.corrupted);
            for (int code : masked.target.codes) s.target_ids.push_back(v.code_id(code));
            s.target_ids.push_back(UnifiedVocab::kEos);
            break;
        }
        case Task::TextInfill: {
            if (!rng) throw UsageError("text_infill: rng required for span corruption");
            const std::vector<int> ids = v.encode(r.text);
            auto [src, tgt] = corrupt_text_infilling(ids, *rng, opts.text_mask_ratio,
                                                     opts.text_mean_span, UnifiedVocab::kMask);
            // The corrupted token stream itself is the source; no template text.
            s.source_ids.push_back(UnifiedVocab::kBos);
            s.source_ids.insert(s.source_ids.end(), src.begin(), src.end());
            s.source_ids.push_back(UnifiedVocab::kEos);
            s.target_ids = std::move(tgt);
            s.target_ids.push_back(UnifiedVocab::kEos);
            return s;
        }
    }

    s.source_ids.push_back(UnifiedVocab::kBos);
    const auto ids = v.encode_mixed(instruction);
    s.source_ids.insert(s.source_ids.end(), ids.begin(), ids.end());
    s.source_ids.push_back(UnifiedVocab::kEos);
    return s;
}

TaskRecord make_itm_negative(const TaskRecord& r, const std::vector<std::string>& caption_pool,
                             Rng& rng) {
    if (caption_pool.size() < 2) throw DataError("itm negative: caption pool must hold >= 2 captions");
    TaskRecord neg = r;
    for (int attempt = 0; attempt < 256; ++attempt) {
        const std::string& cand = caption_pool[rng.below(caption_pool.size())];
        if (cand != r.text) {
            neg.text = cand;
            neg.label = "no";
            return neg;
        }
    }
    for (const std::string& cand : caption_pool) {
        if (cand != r.text) {
            neg.text = cand;
            neg.label = "no";
            return neg;
        }
    }
    throw DataError("itm negative: pool has no caption different from the original");
}

std::pair<std::vector<int>, std::vector<int>> corrupt_text_infilling(std::span<const int> ids,
                                                                     Rng& rng, double mask_ratio,
                                                                     double mean_span, int mask_id) {
    if (ids.empty()) throw DataError("text_infill: empty token sequence");
    if (mask_ratio < 0.0 || mask_ratio > 1.0) throw UsageError("text_infill: mask_ratio outside [0,1]");
    const int n = static_cast<int>(ids.size());
    int budget = static_cast<int>(std::llround(mask_ratio * n));
    budget = std::clamp(budget, 0, n);

    std::vector<uint8_t> masked(static_cast<size_t>(n), 0);
    int covered = 0;
    while (covered < budget) {
        int len = std::max(1, rng.poisson(mean_span));
        len = std::min(len, budget - covered);
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            const int start = static_cast<int>(rng.below(static_cast<uint64_t>(n - len + 1)));
            bool free = true;
            for (int i = start; i < start + len; ++i)
                if (masked[static_cast<size_t>(i)]) {
                    free = false;
                    break;
                }
            if (free) {
                for (int i = start; i < start + len; ++i) masked[static_cast<size_t>(i)] = 1;
                covered += len;
                placed = true;
            }
        }
        if (!placed) {
            // Dense tail: mask the first free positions left to right.
            for (int i = 0; i < n && len > 0; ++i) {
                if (!masked[static_cast<size_t>(i)]) {
                    masked[static_cast<size_t>(i)] = 1;
                    ++covered;
                    --len;
                }
            }
        }
    }

    std::vector<int> source;
    for (int i = 0; i < n; ++i) {
        if (masked[static_cast<size_t>(i)]) {
            if (i == 0 || !masked[static_cast<size_t>(i - 1)]) source.push_back(mask_id);
        } else {
            source.push_back(ids[static_cast<size_t>(i)]);
        }
    }
    return {std::move(source), std::vector<int>(ids.begin(), ids.end())};
}

// ---- batch mixing -----------------------------------------------------------------

BatchMixer::BatchMixer(std::vector<std::vector<int>> group_streams, std::vector<int64_t> ratios,
                       int batch_size, Rng rng)
    : streams_(std::move(group_streams)), rng_(rng) {
    if (streams_.size() != ratios.size()) {
        throw UsageError("mixer: " + std::to_string(streams_.size()) + " groups but " +
                         std::to_string(ratios.size()) + " ratios");
    }
    if (streams_.empty()) throw UsageError("mixer: no groups");
    int64_t total = 0;
    for (int64_t r : ratios) {
        if (r <= 0) throw UsageError("mixer: ratios must be positive integers");
        total += r;
    }
    if (batch_size <= 0) throw UsageError("mixer: batch_size must be positive");
    counts_.resize(streams_.size());
    for (size_t g = 0; g < streams_.size(); ++g) {
        const int64_t c = static_cast<int64_t>(batch_size) * ratios[g];
        if (c % total != 0) {
            throw UsageError("mixer: batch size " + std::to_string(batch_size) +
                             " is not divisible by the ratio total");
        }
        counts_[g] = static_cast<int>(c / total);
        if (counts_[g] > 0 && streams_[g].empty()) {
            throw DataError("mixer: group " + std::to_string(g) + " has no samples");
        }
    }
    order_.resize(streams_.size());
    cursor_.assign(streams_.size(), 0);
    for (size_t g = 0; g < streams_.size(); ++g) {
        order_[g] = streams_[g];
        cursor_[g] = order_[g].size();  // force a shuffle on first draw
    }
}

int BatchMixer::draw(size_t group) {
    auto& ord = order_[group];
    if (cursor_[group] >= ord.size()) {
        for (size_t i = ord.size(); i > 1; --i) {
            const size_t j = rng_.below(i);
            std::swap(ord[i - 1], ord[j]);
        }
        cursor_[group] = 0;
    }
    return ord[cursor_[group]++];
}

std::vector<int> BatchMixer::next() {
    std::vector<int> batch;
    for (size_t g = 0; g < streams_.size(); ++g)
        for (int i = 0; i < counts_[g]; ++i) batch.push_back(draw(g));
    return batch;
}

// ---- synthetic data -----------------------------------------------------------------

namespace {

struct NamedColor {
    const char* name;
    uint8_t r, g, b;
};

const std::array<NamedColor, 8>& palette() {
    static const std::array<NamedColor, 8> p = {{
        {"red", 220, 40, 40},
        {"green", 40, 180, 60},
        {"blue", 50, 80, 220},
        {"yellow", 230, 210, 50},
        {"purple", 150, 60, 200},
        {"cyan", 60, 200, 200},
        {"orange", 240, 140, 40},
        {"white", 235, 235, 235},
    }};
    return p;
}

const char* count_word(size_t n) {
    static const char* words[] = {"zero", "one", "two", "three", "four",
                                  "five", "six",  "seven", "eight"};
    return words[n];
}

struct SynthObject {
    int cx1, cy1, cw, ch;  // cell units on a 16x16 grid
    int color;
    bool square;
    std::string label;
    BBox box() const {
        return BBox{cx1 / 16.0, cy1 / 16.0, (cx1 + cw) / 16.0, (cy1 + ch) / 16.0};
    }
};

}  // namespace

SynthDataset synth_grounding_dataset(const SynthOptions& opts) {
    if (opts.grid_px % kPatchPx != 0) {
        throw UsageError("synth: grid_px must be divisible by " + std::to_string(kPatchPx));
    }
    if (opts.max_objects < 1 || opts.max_objects > static_cast<int>(palette().size())) {
        throw UsageError("synth: max_objects must be in [1," + std::to_string(palette().size()) + "]");
    }
    Rng rng(opts.seed);
    SynthDataset ds;
    const int cell_px = opts.grid_px / 16;

    for (int idx = 0; idx < opts.n; ++idx) {
        const int want = 1 + static_cast<int>(rng.below(static_cast<uint64_t>(opts.max_objects)));
        std::vector<int> color_order(palette().size());
        for (size_t i = 0; i < color_order.size(); ++i) color_order[i] = static_cast<int>(i);
        for (size_t i = color_order.size(); i > 1; --i)
            std::swap(color_order[i - 1], color_order[rng.below(i)]);

        std::vector<SynthObject> objects;
        for (int k = 0; k < want; ++k) {
            SynthObject o;
            o.color = color_order[static_cast<size_t>(k)];
            o.square = rng.below(2) == 0;
            if (o.square) {
                o.cw = o.ch = 4 + static_cast<int>(rng.below(4));
            } else {
                const int s = 3 + static_cast<int>(rng.below(3));
                if (rng.below(2) == 0) {
                    o.cw = 2 * s;
                    o.ch = s;
                } else {
                    o.cw = s;
                    o.ch = 2 * s;
                }
            }
            bool placed = false;
            for (int attempt = 0; attempt < 40 && !placed; ++attempt) {
                o.cx1 = static_cast<int>(rng.below(static_cast<uint64_t>(16 - o.cw + 1)));
                o.cy1 = static_cast<int>(rng.below(static_cast<uint64_t>(16 - o.ch + 1)));
                placed = true;
                for (const auto& other : objects) {
                    const bool apart = o.cx1 >= other.cx1 + other.cw + 1 ||
                                       other.cx1 >= o.cx1 + o.cw + 1 ||
                                       o.cy1 >= other.cy1 + other.ch + 1 ||
                                       other.cy1 >= o.cy1 + o.ch + 1;
                    if (!apart) {
                        placed = false;
                        break;
                    }
                }
            }
            if (!placed) continue;
            o.label = std::string(palette()[static_cast<size_t>(o.color)].name) + " " +
                      (o.square ? "square" : "rectangle");
            objects.push_back(o);
        }

        auto img = std::make_shared<ImageGrid>(
            ImageGrid::filled(opts.grid_px, opts.grid_px, 24, 24, 28));
        for (const auto& o : objects) {
            const auto& c = palette()[static_cast<size_t>(o.color)];
            for (int y = o.cy1 * cell_px; y < (o.cy1 + o.ch) * cell_px; ++y)
                for (int x = o.cx1 * cell_px; x < (o.cx1 + o.cw) * cell_px; ++x)
                    img->set(x, y, c.r, c.g, c.b);
        }
        char path[64];
        std::snprintf(path, sizeof(path), "images/im%05d.ppm", idx);
        ds.images.push_back(img);

        std::sort(objects.begin(), objects.end(), [](const SynthObject& a, const SynthObject& b) {
            if (a.cy1 != b.cy1) return a.cy1 < b.cy1;
            return a.cx1 < b.cx1;
        });

        std::string caption;
        for (size_t i = 0; i < objects.size(); ++i) {
            if (i > 0) caption += (i + 1 == objects.size()) ? " and " : ", ";
            caption += "a " + objects[i].label;
        }

        auto base = [&](Task t) {
            TaskRecord r;
            r.task = t;
            r.image = img;
            r.image_path = path;
            return r;
        };

        for (const auto& o : objects) {
            TaskRecord vg = base(Task::VG);
            vg.text = o.label;
            vg.boxes = {{o.box(), o.label}};
            ds.records.push_back(vg);

            TaskRecord gc = base(Task::GC);
            gc.text = o.label;
            gc.boxes = {{o.box(), o.label}};
            ds.records.push_back(gc);
        }

        TaskRecord cap = base(Task::Caption);
        cap.text = caption;
        ds.records.push_back(cap);

        TaskRecord det = base(Task::Detection);
        for (const auto& o : objects) det.boxes.push_back({o.box(), o.label});
        ds.records.push_back(det);

        TaskRecord itm = base(Task::ITM);
        itm.text = caption;
        itm.label = "yes";
        ds.records.push_back(itm);

        TaskRecord count = base(Task::VQA);
        count.question = "how many objects are in the image?";
        count.answer = count_word(objects.size());
        ds.records.push_back(count);

        int squares = 0, rects = 0;
        for (const auto& o : objects) (o.square ? squares : rects)++;
        for (const auto& o : objects) {
            const bool unique = o.square ? squares == 1 : rects == 1;
            if (unique) {
                TaskRecord color_q = base(Task::VQA);
                color_q.question =
                    std::string("what color is the ") + (o.square ? "square" : "rectangle") + "?";
                color_q.answer = palette()[static_cast<size_t>(o.color)].name;
                ds.records.push_back(color_q);
                break;
            }
        }
    }
    return ds;
}

// ---- dataset files --------------------------------------------------------------------

void save_records_jsonl(const std::vector<TaskRecord>& records, const std::string& jsonl_path) {
    std::ofstream f(jsonl_path, std::ios::binary);
    if (!f) throw DataError("cannot write " + jsonl_path);
    for (const auto& r : records) {
        ordered_json j;
        j["task"] = task_name(r.task);
        if (r.image)
            j["image"] = r.image_path;
        else
            j["image"] = nullptr;
        j["text"] = r.text;
        j["text2"] = r.text2;
        j["question"] = r.question;
        j["answer"] = r.answer;
        j["label"] = r.label;
        j["boxes"] = ordered_json::array();
        for (const auto& b : r.boxes) {
            ordered_json jb;
            jb["x1"] = b.box.x1;
            jb["y1"] = b.box.y1;
            jb["x2"] = b.box.x2;
            jb["y2"] = b.box.y2;
            jb["label"] = b.label;
            j["boxes"].push_back(jb);
        }
        f << j.dump() << "\n";
    }
    if (!f) throw DataError("write failed: " + jsonl_path);
}

std::vector<TaskRecord> load_records_jsonl(const std::string& jsonl_path) {
    std::ifstream f(jsonl_path);
    if (!f) throw DataError("cannot read " + jsonl_path);
    const fs::path base = fs::path(jsonl_path).parent_path();
    std::unordered_map<std::string, std::shared_ptr<const ImageGrid>> cache;
    std::vector<TaskRecord> records;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw DataError(jsonl_path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        TaskRecord r;
        r.task = task_from_name(j.at("task").get<std::string>());
        if (j.contains("image") && !j["image"].is_null()) {
            r.image_path = j["image"].get<std::string>();
            auto& slot = cache[r.image_path];
            if (!slot) slot = std::make_shared<ImageGrid>(read_ppm((base / r.image_path).string()));
            r.image = slot;
        }
        r.text = j.value("text", "");
        r.text2 = j.value("text2", "");
        r.question = j.value("question", "");
        r.answer = j.value("answer", "");
        r.label = j.value("label", "");
        if (j.contains("boxes")) {
            for (const auto& jb : j["boxes"]) {
                LabeledBox b;
                b.box = BBox{jb.at("x1").get<double>(), jb.at("y1").get<double>(),
                             jb.at("x2").get<double>(), jb.at("y2").get<double>()};
                b.label = jb.value("label", "");
                r.boxes.push_back(b);
            }
        }
        records.push_back(std::move(r));
    }
    return records;
}

void save_dataset(SynthDataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    for (size_t i = 0; i < ds.images.size(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "images/im%05zu.ppm", i);
        write_ppm(*ds.images[i], (fs::path(dir) / name).string());
    }
    save_records_jsonl(ds.records, (fs::path(dir) / "data.jsonl").string());
}

PreparedDataset prepare_dataset(std::vector<TaskRecord> records, const UnifiedVocab& v,
                                const TemplateSet& templates, const Codebook* cb,
                                const PrepareOptions& opts, Rng& rng) {
    PreparedDataset out;
    // Negative ITM pairs are manufactured up front so group sizes are stable.
    std::vector<std::string> caption_pool;
    for (const auto& r : records)
        if (r.task == Task::ITM) caption_pool.push_back(r.text);
    for (auto& r : records) {
        if (r.task == Task::ITM && opts.itm_negative_rate > 0.0 &&
            rng.uniform() < opts.itm_negative_rate) {
            r = make_itm_negative(r, caption_pool, rng);
        }
    }
    out.records = std::move(records);
    out.samples.reserve(out.records.size());
    for (size_t i = 0; i < out.records.size(); ++i) {
        InstructionSample s = serialize_sample(out.records[i], v, templates, cb, opts.serialize, &rng);
        s.record_index = static_cast<int>(i);
        out.by_group[static_cast<size_t>(s.group)].push_back(static_cast<int>(out.samples.size()));
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace ofa
