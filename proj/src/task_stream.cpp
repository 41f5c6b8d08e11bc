#include "cpt/task_stream.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_set>

#include "cpt/rng.hpp"

namespace cpt {

namespace {

struct SlotType {
    std::string name;
    std::vector<std::string> descriptions;  // per-service variants
    std::vector<std::string> values;
    // Two mention frames, each prefix + value + suffix. A per-service coin
    // picks which frame phrases each slot, so services mention the same
    // concept with different surface forms.
    std::string frame_prefix[2];
    std::string frame_suffix[2];
};

// Shared pool of slot types. Services sample from here, which is what makes
// prompt reuse, query fusion, and selection-by-loss learnable signals.
const std::vector<SlotType>& slot_pool() {
    static const std::vector<SlotType> pool = {
        {"city",
         {"city to go to", "destination city", "city of the stay"},
         {"paris", "london", "tokyo", "york", "cairo", "oslo", "lima", "delhi"},
         {"going to ", "departing "},
         {"", ""}},
        {"time",
         {"time of the booking", "start time", "time to begin"},
         {"noon", "morning", "evening", "midnight", "7 pm", "9 am"},
         {"at ", "until "},
         {"", ""}},
        {"people",
         {"number of people", "party size", "people to book for"},
         {"one", "two", "three", "four", "five", "six"},
         {"for ", "joined by "},
         {" people", " friends"}},
        {"price",
         {"price range wanted", "budget level", "price bracket"},
         {"cheap", "moderate", "pricey", "luxury"},
         {"with a ", "beyond "},
         {" budget", " prices"}},
        {"rating",
         {"minimum star rating", "star level", "rating floor"},
         {"basic", "bronze", "silver", "gold", "elite"},
         {"rated ", "over "},
         {"", " tier"}},
        {"date",
         {"date of the visit", "day to book", "calendar day"},
         {"monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday"},
         {"on ", "after "},
         {"", ""}},
        {"area",
         {"area of town", "neighborhood wanted", "side of the city"},
         {"north", "south", "east", "west", "center", "uptown"},
         {"around the ", "beyond the "},
         {"", ""}},
        {"cuisine",
         {"type of food", "cuisine style", "kind of dish"},
         {"thai", "pizza", "sushi", "tacos", "curry", "ramen"},
         {"serving ", "tired of "},
         {"", ""}},
        {"genre",
         {"genre of the show", "style of event", "kind of program"},
         {"jazz", "opera", "comedy", "drama", "rock", "ballet"},
         {"featuring ", "besides "},
         {"", ""}},
        {"airline",
         {"carrier to fly with", "airline preferred", "flight company"},
         {"skyway", "jetgo", "aerolux", "cloudair", "zephyr"},
         {"flying ", "avoiding "},
         {"", ""}},
        {"duration",
         {"length of the stay", "number of nights", "stay duration"},
         {"brief", "short", "weeklong", "extended"},
         {"for a ", "beyond a "},
         {" stay", " stay"}},
        {"payment",
         {"payment method used", "way to pay", "payment option"},
         {"cash", "card", "voucher", "points", "wallet"},
         {"paying by ", "declining "},
         {"", ""}},
    };
    return pool;
}

const std::vector<std::string>& domain_names() {
    static const std::vector<std::string> names = {
        "hotels", "flights", "restaurants", "events", "rentals",
        "travel", "salons",  "movies",      "banks",  "buses",
        "trains", "doctors", "homes",       "rides",  "media"};
    return names;
}

const std::vector<std::string>& intro_templates() {
    // {} is replaced by the service's domain word
    static const std::vector<std::string> intros = {
        "i need a booking for {}",        "please set up my {} plan",
        "hello i am arranging {} now",    "can you handle my {} request",
        "looking to sort out {} today",   "hi there i want {} help",
        "time to plan my {} trip",        "set me up with {} please",
    };
    return intros;
}

std::string with_domain(const std::string& tmpl, const std::string& domain) {
    std::string out = tmpl;
    const size_t pos = out.find("{}");
    out.replace(pos, 2, domain);
    return out;
}

}  // namespace

Split make_split(int n, uint64_t seed) {
    if (n < 0) throw std::runtime_error("make_split: negative size");
    std::vector<int> perm;
    {
        auto rng = rng::engine(seed);
        perm = rng::permutation(n, rng);
    }
    // largest-remainder apportionment of n over the 7:1:2 ratio
    const double weights[3] = {7.0, 1.0, 2.0};
    int counts[3];
    double frac[3];
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double ideal = n * weights[i] / 10.0;
        counts[i] = static_cast<int>(ideal);
        frac[i] = ideal - counts[i];
        assigned += counts[i];
    }
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (frac[i] > frac[best]) best = i;
        ++counts[best];
        frac[best] = -1.0;
        ++assigned;
    }
    Split s;
    int at = 0;
    for (int i = 0; i < counts[0]; ++i) s.train.push_back(perm[at++]);
    for (int i = 0; i < counts[1]; ++i) s.val.push_back(perm[at++]);
    for (int i = 0; i < counts[2]; ++i) s.test.push_back(perm[at++]);
    return s;
}

TaskStream generate_stream(const GeneratorConfig& cfg) {
    if (cfg.n_services <= 0) throw std::runtime_error("generate_stream: n_services must be positive");
    if (cfg.min_slots < 2 || cfg.max_slots > 10 || cfg.min_slots > cfg.max_slots)
        throw std::runtime_error("generate_stream: slot range must sit inside [2,10]");
    if (cfg.pool_size < cfg.max_slots || cfg.pool_size > static_cast<int>(slot_pool().size()))
        throw std::runtime_error("generate_stream: pool size out of range");
    if (cfg.min_samples < 32 || cfg.max_samples > 4096 || cfg.min_samples > cfg.max_samples)
        throw std::runtime_error("generate_stream: samples per service must sit inside [32,4096]");
    if (cfg.templates_per_service < 1 ||
        cfg.templates_per_service > static_cast<int>(intro_templates().size()))
        throw std::runtime_error("generate_stream: bad template count");

    TaskStream stream;
    for (int s = 0; s < cfg.n_services; ++s) {
        auto rng = rng::engine(rng::mix(cfg.seed, 0x5eed, s));
        Service svc;
        const auto& domains = domain_names();
        const std::string domain = domains[s % domains.size()];
        const int round = s / static_cast<int>(domains.size()) + 1;
        svc.name = domain + "_" + std::to_string(round);
        svc.id = svc.name;

        // slot set: distinct types from the shared pool, one description
        // variant each so services phrase the same concept differently
        const int n_slots = rng::uniform_int(rng, cfg.min_slots, cfg.max_slots);
        std::vector<int> type_ids = rng::sample_without_replacement(cfg.pool_size, n_slots, rng);
        // Which mention frame phrases each slot — this service's convention.
        for (int t : type_ids) {
            const SlotType& ty = slot_pool()[t];
            Slot slot;
            slot.name = ty.name;
            slot.description =
                ty.descriptions[rng::uniform_int(rng, 0, (int)ty.descriptions.size() - 1)];
            slot.service_id = svc.id;
            svc.slots.push_back(slot);
            svc.true_frame.push_back(rng::uniform_int(rng, 0, 1));
        }
        const std::vector<int>& true_frame = svc.true_frame;

        std::vector<std::string> intros;
        {
            std::vector<int> pick = rng::sample_without_replacement(
                (int)intro_templates().size(), cfg.templates_per_service, rng);
            for (int p : pick) intros.push_back(with_domain(intro_templates()[p], domain));
        }

        const int n_dialogs = rng::uniform_int(rng, cfg.min_samples, cfg.max_samples);
        std::unordered_set<std::string> seen;
        int attempts = 0;
        const int max_attempts = n_dialogs * 50;
        while ((int)seen.size() < n_dialogs && attempts < max_attempts) {
            ++attempts;
            DialogExample ex;
            std::string text = intros[rng::uniform_int(rng, 0, (int)intros.size() - 1)];
            // mention a random subset of slots, possibly none
            std::vector<int> order = rng::permutation(n_slots, rng);
            std::vector<std::string> fragments;
            for (int oi : order) {
                if (rng::uniform_int(rng, 0, 9) >= 7) continue;  // 70% mention rate
                const SlotType& ty = slot_pool()[type_ids[oi]];
                const int nv = (int)ty.values.size();
                const int vi = rng::uniform_int(rng, 0, nv - 1);
                const int tf = true_frame[oi];
                fragments.push_back(ty.frame_prefix[tf] + ty.values[vi] + ty.frame_suffix[tf]);
                ex.values[svc.slots[oi].name] = ty.values[vi];
            }
            rng::shuffle(fragments, rng);
            for (const std::string& f : fragments) text += " " + f;
            if (!seen.insert(text).second) continue;
            ex.text = text;
            svc.dialogs.push_back(std::move(ex));
        }
        if ((int)svc.dialogs.size() < cfg.min_samples)
            throw std::runtime_error("generate_stream: could not reach " +
                                     std::to_string(cfg.min_samples) +
                                     " unique dialogs for service " + svc.name);

        stream.splits.push_back(
            make_split((int)svc.dialogs.size(), rng::mix(cfg.seed, 0x59117, s)));
        stream.services.push_back(std::move(svc));
    }
    return stream;
}

TaskStream generate_pretrain_stream(const GeneratorConfig& cfg) {
    GeneratorConfig held_out = cfg;
    held_out.seed = rng::mix(cfg.seed, 0x11e1d0);
    return generate_stream(held_out);
}

// ---- serialization ---------------------------------------------------------

nlohmann::json stream_to_json(const TaskStream& stream) {
    nlohmann::json out;
    out["services"] = nlohmann::json::array();
    for (size_t i = 0; i < stream.services.size(); ++i) {
        const Service& svc = stream.services[i];
        nlohmann::json js;
        js["name"] = svc.name;
        js["slots"] = nlohmann::json::array();
        for (const Slot& s : svc.slots)
            js["slots"].push_back({{"name", s.name}, {"description", s.description}});
        if (!svc.true_frame.empty()) js["conventions"] = svc.true_frame;
        js["dialogs"] = nlohmann::json::array();
        for (const DialogExample& d : svc.dialogs) {
            nlohmann::json jd;
            jd["text"] = d.text;
            jd["values"] = nlohmann::json::object();
            for (const auto& [k, v] : d.values) jd["values"][k] = v;
            js["dialogs"].push_back(std::move(jd));
        }
        const Split& sp = stream.splits[i];
        js["split"] = {{"train", sp.train}, {"val", sp.val}, {"test", sp.test}};
        out["services"].push_back(std::move(js));
    }
    return out;
}

TaskStream stream_from_json(const nlohmann::json& j, IngestReport* report) {
    TaskStream stream;
    if (!j.contains("services") || !j["services"].is_array())
        throw std::runtime_error("corpus file: missing 'services' array");
    int svc_idx = 0;
    for (const auto& js : j["services"]) {
        Service svc;
        if (!js.contains("name"))
            throw std::runtime_error("corpus file: service #" + std::to_string(svc_idx) +
                                     " lacks 'name'");
        svc.name = js["name"].get<std::string>();
        svc.id = svc.name;
        std::set<std::string> slot_names;
        for (const auto& jslot : js.value("slots", nlohmann::json::array())) {
            Slot s;
            s.name = jslot.at("name").get<std::string>();
            s.description = jslot.at("description").get<std::string>();
            s.service_id = svc.id;
            if (s.description.empty())
                throw std::runtime_error("corpus file: service '" + svc.name + "' slot '" +
                                         s.name + "' has an empty description");
            if (!slot_names.insert(s.name).second)
                throw std::runtime_error("corpus file: service '" + svc.name +
                                         "' has duplicate slot '" + s.name + "'");
            svc.slots.push_back(std::move(s));
        }
        if (js.contains("conventions")) {
            svc.true_frame = js["conventions"].get<std::vector<int>>();
            if (svc.true_frame.size() != svc.slots.size())
                throw std::runtime_error("corpus file: service '" + svc.name +
                                         "' conventions list does not match its slots");
            for (int f : svc.true_frame)
                if (f != 0 && f != 1)
                    throw std::runtime_error("corpus file: service '" + svc.name +
                                             "' conventions must be 0 or 1");
        }
        int dlg_idx = 0;
        for (const auto& jd : js.value("dialogs", nlohmann::json::array())) {
            // dialogs tagged with several services are out of scope
            if (jd.contains("services") && jd["services"].is_array() &&
                jd["services"].size() > 1) {
                if (report) {
                    ++report->skipped_multi_service;
                    report->warnings.push_back("service '" + svc.name + "' dialog #" +
                                               std::to_string(dlg_idx) +
                                               " involves several services, skipped");
                }
                ++dlg_idx;
                continue;
            }
            DialogExample d;
            d.text = jd.at("text").get<std::string>();
            const nlohmann::json values = jd.value("values", nlohmann::json::object());
            for (const auto& [k, v] : values.items()) {
                if (!slot_names.count(k))
                    throw std::runtime_error("corpus file: service '" + svc.name +
                                             "' dialog #" + std::to_string(dlg_idx) +
                                             " fills unknown slot '" + k + "'");
                d.values[k] = v.get<std::string>();
            }
            svc.dialogs.push_back(std::move(d));
            ++dlg_idx;
        }
        Split sp;
        if (js.contains("split")) {
            sp.train = js["split"].at("train").get<std::vector<int>>();
            sp.val = js["split"].at("val").get<std::vector<int>>();
            sp.test = js["split"].at("test").get<std::vector<int>>();
            std::set<int> all;
            for (const auto* part : {&sp.train, &sp.val, &sp.test})
                for (int idx : *part) {
                    if (idx < 0 || idx >= (int)svc.dialogs.size())
                        throw std::runtime_error("corpus file: service '" + svc.name +
                                                 "' split index " + std::to_string(idx) +
                                                 " out of range");
                    if (!all.insert(idx).second)
                        throw std::runtime_error("corpus file: service '" + svc.name +
                                                 "' split reuses index " +
                                                 std::to_string(idx));
                }
        } else {
            sp = make_split((int)svc.dialogs.size(), rng::mix(0, 0x59117, svc_idx));
        }
        stream.splits.push_back(std::move(sp));
        stream.services.push_back(std::move(svc));
        ++svc_idx;
    }
    return stream;
}

TaskStream ingest_schema_corpus(const std::string& path, IngestReport* report) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("corpus file " + path + ": " + e.what());
    }
    return stream_from_json(j, report);
}

void export_schema_corpus(const TaskStream& stream, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write corpus file: " + path);
    out << stream_to_json(stream).dump(1) << "\n";
}

// ---- memory -----------------------------------------------------------------

std::vector<int> sample_memory(const TaskStream& stream, int task_id, int capacity,
                               uint64_t seed) {
    if (capacity < 0) throw std::runtime_error("sample_memory: negative capacity");
    const std::vector<int>& train = stream.splits.at(task_id).train;
    if (capacity >= (int)train.size()) return train;
    auto rng = rng::engine(rng::mix(seed, 0x3e30, task_id));
    std::vector<int> pick = rng::sample_without_replacement((int)train.size(), capacity, rng);
    std::vector<int> out;
    out.reserve(pick.size());
    for (int p : pick) out.push_back(train[p]);
    return out;
}

std::vector<int> proportional_budget(const TaskStream& stream, int total_budget) {
    const int t = stream.n_tasks();
    if (total_budget < t)
        throw std::runtime_error("proportional_budget: budget " +
                                 std::to_string(total_budget) + " below task count " +
                                 std::to_string(t));
    double total_size = 0.0;
    std::vector<int> sizes(t);
    for (int i = 0; i < t; ++i) {
        sizes[i] = (int)stream.splits[i].train.size();
        total_size += sizes[i];
    }
    // largest-remainder apportionment, then lift any zero to 1 by taking
    // from the currently largest capacity
    std::vector<int> caps(t);
    std::vector<std::pair<double, int>> frac(t);
    int assigned = 0;
    for (int i = 0; i < t; ++i) {
        const double ideal = total_budget * sizes[i] / total_size;
        caps[i] = (int)ideal;
        assigned += caps[i];
        frac[i] = {ideal - caps[i], i};
    }
    std::sort(frac.begin(), frac.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;  // deterministic tie-break by task id
    });
    for (int i = 0; i < total_budget - assigned; ++i) ++caps[frac[i].second];
    for (int i = 0; i < t; ++i) {
        while (caps[i] < 1) {
            int biggest = (int)(std::max_element(caps.begin(), caps.end()) - caps.begin());
            --caps[biggest];
            ++caps[i];
        }
    }
    return caps;
}

// ---- pre-training corpus -------------------------------------------------------

std::string restatement_text(const Service& svc, const DialogExample& ex) {
    std::string text = ex.text + " <sep>";
    for (const Slot& s : svc.slots) {
        auto it = ex.values.find(s.name);
        const std::string& v = (it == ex.values.end()) ? "None" : it->second;
        text += " " + s.description + " : " + v + " .";
    }
    return text;
}

std::vector<std::string> build_pretrain_corpus(const TaskStream& stream) {
    std::vector<std::string> corpus;
    for (int i = 0; i < stream.n_tasks(); ++i) {
        const Service& svc = stream.services[i];
        for (int idx : stream.splits[i].train)
            corpus.push_back(restatement_text(svc, svc.dialogs[idx]));
    }
    return corpus;
}

std::vector<std::string> stream_vocabulary_texts(const TaskStream& stream) {
    std::vector<std::string> texts;
    texts.push_back("None ; = : .");
    for (const Service& svc : stream.services) {
        texts.push_back(svc.name);
        Query q = build_query(svc.slots);
        texts.push_back(q.rendered);
        for (const Slot& s : svc.slots) texts.push_back(s.name + " " + s.description);
        for (const DialogExample& d : svc.dialogs) {
            texts.push_back(d.text);
            for (const auto& [k, v] : d.values) texts.push_back(v);
        }
    }
    return texts;
}

bool streams_equal(const TaskStream& a, const TaskStream& b) {
    if (a.services.size() != b.services.size()) return false;
    if (a.splits != b.splits) return false;
    for (size_t i = 0; i < a.services.size(); ++i) {
        const Service &x = a.services[i], &y = b.services[i];
        if (x.id != y.id || x.name != y.name) return false;
        if (x.dialogs != y.dialogs) return false;
        if (x.true_frame != y.true_frame) return false;
        if (x.slots.size() != y.slots.size()) return false;
        for (size_t k = 0; k < x.slots.size(); ++k) {
            if (x.slots[k].name != y.slots[k].name ||
                x.slots[k].description != y.slots[k].description ||
                x.slots[k].service_id != y.slots[k].service_id)
                return false;
        }
    }
    return true;
}

}  // namespace cpt
