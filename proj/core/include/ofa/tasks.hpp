#pragma once

#include <array>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ofa/coord.hpp"
#include "ofa/rng.hpp"
#include "ofa/vocab.hpp"

namespace ofa {

enum class Task {
    VG,          // visual grounding: text -> 4 location tokens
    GC,          // grounded captioning: region tokens -> text
    ITM,         // image-text matching: yes/no
    Caption,
    VQA,
    Detection,   // all objects as [4 loc tokens, label] runs
    ImageInfill, // masked center -> code tokens
    TextInfill,  // span-corrupted text -> original text
    Classify,    // closed-set classification (image label or text sentiment)
    SentPair,
    Summarize,
};

enum class TaskGroup { VisionLanguage = 0, Detection = 1, ImageOnly = 2, TextOnly = 3 };
constexpr int kNumGroups = 4;

std::string task_name(Task t);
Task task_from_name(const std::string& name);
const char* group_name(TaskGroup g);

struct LabeledBox {
    BBox box;
    std::string label;
};

// One raw task instance; which fields are required depends on the task.
struct TaskRecord {
    Task task = Task::Caption;
    std::shared_ptr<const ImageGrid> image;
    std::string image_path;  // as written in / read from JSONL
    std::string text;
    std::string text2;
    std::string question;
    std::string answer;
    std::string label;
    std::vector<LabeledBox> boxes;
};

TaskGroup group_of(const TaskRecord& r);
// Throws DataError naming the missing field.
void validate_record(const TaskRecord& r);

// Instruction templates are data: defaults are built in, overridable from a
// `name<TAB>template` file with {field} placeholders. Classify has two
// variants keyed "classify_image" / "classify_text".
class TemplateSet {
public:
    static TemplateSet defaults();
    static TemplateSet load(const std::string& path);
    void save(const std::string& path) const;

    const std::string& get(const std::string& name) const;
    std::string render(const TaskRecord& r, int num_loc_bins) const;
    const std::map<std::string, std::string>& all() const { return templates_; }

private:
    std::map<std::string, std::string> templates_;
};

// Serialized (source tokens, patch grid, target tokens) form of a record.
struct InstructionSample {
    Task task = Task::Caption;
    TaskGroup group = TaskGroup::VisionLanguage;
    std::vector<int> source_ids;  // BOS ... EOS, never contains code tokens
    std::shared_ptr<const ImageGrid> patches;
    std::vector<int> target_ids;  // EOS-terminated
    // Per-target-position candidate sets for Trie-masked training; empty when
    // the task has no closed label set.
    std::vector<std::vector<int>> allowed;
    int record_index = -1;
};

struct SerializeOptions {
    double text_mask_ratio = 0.3;
    double text_mean_span = 3.0;
    double infill_fraction = 0.5;
    bool trie_targets = true;  // attach closed-set masks for ITM / SentPair
};

// rng is required for TextInfill (span sampling); cb for ImageInfill.
InstructionSample serialize_sample(const TaskRecord& r, const UnifiedVocab& v,
                                   const TemplateSet& templates, const Codebook* cb,
                                   const SerializeOptions& opts, Rng* rng);

// Replace the caption with a uniformly sampled different one; label -> "no".
TaskRecord make_itm_negative(const TaskRecord& r, const std::vector<std::string>& caption_pool,
                             Rng& rng);

// BART-style span corruption: Poisson(mean_span) spans (min length 1) masked
// until round(mask_ratio * n) tokens are covered; each maximal masked run
// becomes one MASK in the source. Returns (source_ids, target_ids).
std::pair<std::vector<int>, std::vector<int>> corrupt_text_infilling(std::span<const int> ids,
                                                                     Rng& rng, double mask_ratio,
                                                                     double mean_span, int mask_id);

// Closed label sets used for Trie-masked training of yes/no style tasks.
std::vector<std::string> task_label_set(Task t);

// Exact-ratio multitask batch mixing over per-group sample index streams.
// Every batch holds batch_size * ratio[g] / sum(ratios) samples of group g
// (integral by contract); order within a group is a seeded shuffle and
// exhausted groups restart with a fresh shuffle.
class BatchMixer {
public:
    BatchMixer(std::vector<std::vector<int>> group_streams, std::vector<int64_t> ratios,
               int batch_size, Rng rng);
    const std::vector<int>& counts() const { return counts_; }
    // Returns sample indices, grouped in declared group order.
    std::vector<int> next();

private:
    int draw(size_t group);
    std::vector<std::vector<int>> streams_;
    std::vector<std::vector<int>> order_;
    std::vector<size_t> cursor_;
    std::vector<int> counts_;
    Rng rng_;
};

// ---- synthetic grounding corpus ----------------------------------------------

struct SynthOptions {
    int n = 100;
    int grid_px = 64;
    int max_objects = 4;
    uint64_t seed = 0;
};

struct SynthDataset {
    std::vector<std::shared_ptr<const ImageGrid>> images;
    std::vector<TaskRecord> records;
};

// n images of 1..max_objects non-overlapping colored rectangles on a dark
// background, with exact ground truth for VG/GC/Caption/Detection/ITM/VQA.
SynthDataset synth_grounding_dataset(const SynthOptions& opts);

// ---- dataset files -------------------------------------------------------------

void save_records_jsonl(const std::vector<TaskRecord>& records, const std::string& jsonl_path);
// Loads records; image paths resolve relative to the JSONL's directory.
std::vector<TaskRecord> load_records_jsonl(const std::string& jsonl_path);
// Writes images next to the JSONL and fills in image_path fields.
void save_dataset(SynthDataset& ds, const std::string& dir);

struct PreparedDataset {
    std::vector<TaskRecord> records;
    std::vector<InstructionSample> samples;
    std::array<std::vector<int>, kNumGroups> by_group;  // sample indices
};

struct PrepareOptions {
    SerializeOptions serialize;
    double itm_negative_rate = 0.5;  // fraction of ITM records flipped to negatives
};

PreparedDataset prepare_dataset(std::vector<TaskRecord> records, const UnifiedVocab& v,
                                const TemplateSet& templates, const Codebook* cb,
                                const PrepareOptions& opts, Rng& rng);

}  // namespace ofa
