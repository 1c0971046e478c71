#include "ctrv/cli.hpp"

#include "ctrv/analysis.hpp"
#include "ctrv/guestkit.hpp"
#include "ctrv/pipeline.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

namespace fs = std::filesystem;

namespace ctrv::cli {

namespace {

struct CliError : std::runtime_error {
    CliError(int code, const std::string& what) : std::runtime_error(what), exitCode(code) {}
    int exitCode;
};

std::vector<uint8_t> readFile(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CliError(kExitConfig, "cannot open " + path.string());
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

void writeFile(const fs::path& path, std::span<const uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw CliError(kExitConfig, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

void writeTextFile(const fs::path& path, const std::string& text) {
    writeFile(path, std::span(reinterpret_cast<const uint8_t*>(text.data()), text.size()));
}

// Deterministic test-case generator.
struct SplitMix64 {
    uint64_t state;

    uint64_t next() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }
};

struct Settings {
    std::string configPath;
    std::string guestPath;
    std::string fixtureName;
    std::string targetSymbol = "microwalk_target";
    std::string testcaseDir;
    std::string outputDir;
    std::vector<uint32_t> tracedImages = {0};
    std::vector<std::string> reportFormats;
    bool generate = false;
    uint64_t generateCount = 16;
    uint64_t generateLength = 16;
    int64_t seed = -1;
    uint64_t heapOffsetPages = 0;
    uint64_t fuel = engine::Engine::kDefaultFuel;
    bool verifyDeterminism = false;
};

void applyConfigFile(Settings& s) {
    if (s.configPath.empty())
        return;
    std::ifstream in(s.configPath);
    if (!in)
        throw CliError(kExitConfig, "cannot open config " + s.configPath);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw CliError(kExitConfig, "bad config JSON: " + std::string(e.what()));
    }
    if (!doc.is_object())
        throw CliError(kExitConfig, "config must be a JSON object");
    if (doc.contains("guestPath") && s.guestPath.empty())
        s.guestPath = doc["guestPath"].get<std::string>();
    if (doc.contains("targetSymbol"))
        s.targetSymbol = doc["targetSymbol"].get<std::string>();
    if (doc.contains("testcaseDir") && s.testcaseDir.empty())
        s.testcaseDir = doc["testcaseDir"].get<std::string>();
    if (doc.contains("outputDir") && s.outputDir.empty())
        s.outputDir = doc["outputDir"].get<std::string>();
    if (doc.contains("tracedImages"))
        s.tracedImages = doc["tracedImages"].get<std::vector<uint32_t>>();
    if (doc.contains("reportFormats") && s.reportFormats.empty())
        s.reportFormats = doc["reportFormats"].get<std::vector<std::string>>();
    if (doc.contains("generator")) {
        const auto& gen = doc["generator"];
        s.generate = true;
        if (gen.contains("count"))
            s.generateCount = gen["count"].get<uint64_t>();
        if (gen.contains("byteLength"))
            s.generateLength = gen["byteLength"].get<uint64_t>();
        if (gen.contains("seed") && s.seed < 0)
            s.seed = gen["seed"].get<int64_t>();
    }
    if (doc.contains("heapOffsetPages"))
        s.heapOffsetPages = doc["heapOffsetPages"].get<uint64_t>();
}

std::vector<uint8_t> loadGuest(const Settings& s) {
    if (!s.fixtureName.empty())
        return guestkit::buildFixture(s.fixtureName).elf;
    if (s.guestPath.empty())
        throw CliError(kExitConfig, "no guest given (use --guest or --fixture)");
    return readFile(s.guestPath);
}

std::string guestDisplayPath(const Settings& s) {
    if (!s.fixtureName.empty())
        return s.fixtureName + ".elf";
    return s.guestPath;
}

void generateTestcases(const Settings& s, const fs::path& dir, std::ostream& err) {
    if (s.seed < 0)
        throw CliError(kExitConfig, "test-case generation needs --seed");
    if (s.generateCount < 2)
        throw CliError(kExitConfig, "test-case generation needs a count of at least 2");
    fs::create_directories(dir);
    SplitMix64 rng{static_cast<uint64_t>(s.seed)};
    for (uint64_t i = 0; i < s.generateCount; ++i) {
        std::vector<uint8_t> bytes(s.generateLength);
        for (auto& b : bytes)
            b = static_cast<uint8_t>(rng.next() & 0xFF);
        std::ostringstream name;
        name << "tc" << std::setw(4) << std::setfill('0') << i << ".bin";
        writeFile(dir / name.str(), bytes);
    }
    err << "generated " << s.generateCount << " test cases in " << dir.string() << "\n";
}

std::vector<pipeline::TestcaseInput> loadTestcases(const fs::path& dir) {
    if (dir.empty() || !fs::exists(dir))
        return {};
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_regular_file())
            files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<pipeline::TestcaseInput> cases;
    for (const auto& file : files)
        cases.push_back({file.filename().string(), readFile(file)});
    return cases;
}

int exitCodeFor(const engine::ExitStatus& status, std::ostream& err) {
    switch (status.kind) {
    case engine::ExitStatus::Kind::Exited:
        return kExitOk;
    case engine::ExitStatus::Kind::FuelExhausted:
        err << "guest ran out of fuel after " << status.instructionsRetired
            << " instructions\n";
        return kExitGuestFault;
    case engine::ExitStatus::Kind::Fault:
    default:
        if (status.fault) {
            err << "guest fault: " << status.fault->message << "\n";
            if (status.fault->kind == engine::GuestFault::Kind::UnsupportedSyscall)
                return kExitUnsupportedSyscall;
        }
        return kExitGuestFault;
    }
}

std::string traceFileName(int index) {
    if (index < 0)
        return "prefix.trace";
    std::ostringstream name;
    name << "t" << std::setw(4) << std::setfill('0') << index << ".trace";
    return name.str();
}

void writeImagesJson(const fs::path& path, std::span<const trace::ImageInfo> images) {
    nlohmann::ordered_json doc;
    doc["images"] = nlohmann::ordered_json::array();
    for (const auto& image : images) {
        doc["images"].push_back({{"index", image.index},
                                 {"path", image.path},
                                 {"start", image.start},
                                 {"end", image.end}});
    }
    writeTextFile(path, doc.dump(2) + "\n");
}

std::vector<trace::ImageInfo> readImagesJson(const fs::path& path) {
    std::ifstream in(path);
    if (!in)
        throw CliError(kExitConfig, "cannot open " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw CliError(kExitConfig, "bad images.json: " + std::string(e.what()));
    }
    std::vector<trace::ImageInfo> images;
    for (const auto& item : doc.at("images")) {
        images.push_back({item.at("index").get<uint32_t>(),
                          item.at("path").get<std::string>(),
                          item.at("start").get<uint64_t>(), item.at("end").get<uint64_t>()});
    }
    return images;
}

struct TraceSet {
    std::vector<trace::ImageInfo> images;
    std::vector<uint8_t> prefix;
    std::vector<std::vector<uint8_t>> testcases;
};

TraceSet loadTraceSet(const fs::path& dir) {
    TraceSet set;
    set.images = readImagesJson(dir / "images.json");
    fs::path prefixPath = dir / "prefix.trace";
    if (fs::exists(prefixPath))
        set.prefix = readFile(prefixPath);
    for (int i = 0;; ++i) {
        fs::path path = dir / traceFileName(i);
        if (!fs::exists(path))
            break;
        set.testcases.push_back(readFile(path));
    }
    return set;
}

struct CanonicalSet {
    trace::PreprocessState prefixState;
    std::optional<trace::CanonicalTrace> prefix;
    std::vector<trace::CanonicalTrace> testcases;
};

CanonicalSet preprocessSet(const TraceSet& set) {
    CanonicalSet out;
    if (!set.prefix.empty()) {
        auto result = trace::preprocess(set.prefix, set.images);
        out.prefixState = std::move(result.state);
        out.prefix = std::move(result.trace);
    }
    for (const auto& raw : set.testcases)
        out.testcases.push_back(trace::preprocess(raw, set.images, &out.prefixState).trace);
    return out;
}

// Maps image-0 offsets back to "symbol+0x.." when the guest binary is
// reachable from the recorded path.
analysis::SymbolResolver makeSymbolResolver(const std::vector<trace::ImageInfo>& images) {
    if (images.empty() || !fs::exists(images[0].path))
        return {};
    std::map<uint64_t, std::string> byAddr;
    try {
        auto bytes = readFile(images[0].path);
        for (const auto& [name, addr] : loader::readElfSymbols(bytes))
            byAddr[addr] = name;
    } catch (...) {
        return {};
    }
    if (byAddr.empty())
        return {};
    uint64_t start = images[0].start;
    return [byAddr, start](const trace::CodeRef& ref) -> std::optional<std::string> {
        if (ref.imageIndex != 0)
            return std::nullopt;
        auto it = byAddr.upper_bound(start + ref.offset);
        if (it == byAddr.begin())
            return std::nullopt;
        --it;
        uint64_t delta = start + ref.offset - it->first;
        if (delta == 0)
            return it->second;
        std::ostringstream out;
        out << it->second << "+0x" << std::hex << delta;
        return out.str();
    };
}

struct CapturedTraces {
    std::map<int, std::shared_ptr<std::ostringstream>> sinks;

    trace::SinkFactory factory() {
        return [this](int index) {
            auto stream = std::make_shared<std::ostringstream>();
            sinks[index] = stream;
            return stream;
        };
    }

    std::map<int, std::string> bytes() const {
        std::map<int, std::string> out;
        for (const auto& [index, stream] : sinks)
            out[index] = stream->str();
        return out;
    }
};

pipeline::RunConfig baseRunConfig(const Settings& s) {
    pipeline::RunConfig config;
    config.guestElf = loadGuest(s);
    config.guestPath = guestDisplayPath(s);
    config.heapOffsetPages = s.heapOffsetPages;
    config.fuel = s.fuel;
    config.trace.targetSymbol = s.targetSymbol;
    config.trace.tracedImages.clear();
    for (uint32_t index : s.tracedImages)
        config.trace.tracedImages.insert(index);
    return config;
}

int cmdFixture(const Settings& s, bool list, std::ostream& out, std::ostream& err) {
    if (list) {
        for (const auto& name : guestkit::fixtureNames())
            out << name << "\n";
        return kExitOk;
    }
    if (s.fixtureName.empty())
        throw CliError(kExitConfig, "fixture name required (or --list)");
    auto fixture = guestkit::buildFixture(s.fixtureName);
    fs::path dir = s.outputDir.empty() ? fs::path(".") : fs::path(s.outputDir);
    fs::create_directories(dir);
    writeFile(dir / (fixture.name + ".elf"), fixture.elf);
    nlohmann::ordered_json manifest;
    manifest["name"] = fixture.name;
    manifest["totalLeakages"] = fixture.manifest.totalLeakages;
    manifest["uniqueLeakages"] = fixture.manifest.uniqueLeakages;
    manifest["leakKinds"] = fixture.manifest.leakKinds;
    writeTextFile(dir / (fixture.name + ".manifest.json"), manifest.dump(2) + "\n");
    err << "wrote " << (dir / (fixture.name + ".elf")).string() << "\n";
    return kExitOk;
}

int cmdTrace(const Settings& s, std::ostream& out, std::ostream& err) {
    if (s.outputDir.empty())
        throw CliError(kExitConfig, "trace needs --out");
    fs::path outDir(s.outputDir);
    fs::create_directories(outDir);

    fs::path tcDir = s.testcaseDir.empty() ? outDir / "testcases" : fs::path(s.testcaseDir);
    if (s.generate)
        generateTestcases(s, tcDir, err);

    pipeline::RunConfig config = baseRunConfig(s);
    config.testcases = loadTestcases(tcDir);
    if (config.testcases.size() < 2)
        throw CliError(kExitConfig, "tracing needs at least 2 test cases (got " +
                                        std::to_string(config.testcases.size()) + ")");

    config.sinks = [&](int index) -> std::shared_ptr<std::ostream> {
        auto stream = std::make_shared<std::ofstream>(outDir / traceFileName(index),
                                                      std::ios::binary | std::ios::trunc);
        if (!*stream)
            throw CliError(kExitConfig,
                           "cannot write " + (outDir / traceFileName(index)).string());
        return stream;
    };

    auto result = pipeline::run(config);
    writeImagesJson(outDir / "images.json", result.images);

    int code = exitCodeFor(result.status, err);
    if (code != kExitOk)
        return code;
    out << "traced " << result.testcasesEntered << " test cases, "
        << result.status.instructionsRetired << " instructions retired\n";
    if (result.testcasesEntered != static_cast<int>(config.testcases.size())) {
        err << "warning: guest entered the target " << result.testcasesEntered
            << " times for " << config.testcases.size() << " test cases\n";
    }
    return kExitOk;
}

int cmdPreprocess(const Settings& s, const std::string& traceDir, std::ostream& out) {
    fs::path inDir(traceDir);
    fs::path outDir = s.outputDir.empty() ? inDir : fs::path(s.outputDir);
    fs::create_directories(outDir);
    TraceSet set = loadTraceSet(inDir);
    CanonicalSet canonical = preprocessSet(set);
    if (canonical.prefix)
        writeFile(outDir / "prefix.ctrace", trace::serializeCanonical(*canonical.prefix));
    for (size_t i = 0; i < canonical.testcases.size(); ++i) {
        std::ostringstream name;
        name << "t" << std::setw(4) << std::setfill('0') << i << ".ctrace";
        writeFile(outDir / name.str(),
                  trace::serializeCanonical(canonical.testcases[i]));
    }
    out << "preprocessed " << canonical.testcases.size() << " test-case traces\n";
    return kExitOk;
}

int cmdAnalyze(const Settings& s, const std::string& traceDir, std::ostream& out) {
    fs::path inDir(traceDir);
    TraceSet set = loadTraceSet(inDir);
    CanonicalSet canonical = preprocessSet(set);
    auto report = analysis::analyze(canonical.testcases, set.images);
    auto resolver = makeSymbolResolver(set.images);

    std::vector<std::string> formats =
        s.reportFormats.empty() ? std::vector<std::string>{"text", "json"} : s.reportFormats;
    fs::path outDir = s.outputDir.empty() ? inDir : fs::path(s.outputDir);
    fs::create_directories(outDir);
    for (const auto& format : formats) {
        if (format == "text") {
            writeTextFile(outDir / "report.txt", analysis::renderText(report, resolver));
        } else if (format == "json") {
            writeTextFile(outDir / "report.json", analysis::renderJson(report, resolver));
        } else {
            throw CliError(kExitConfig, "unknown report format '" + format + "'");
        }
    }
    out << analysis::renderText(report, resolver);
    return report.totalLeakages > 0 ? kExitLeakage : kExitOk;
}

int cmdRun(const Settings& s, std::ostream& out, std::ostream& err) {
    pipeline::RunConfig config = baseRunConfig(s);
    config.testcases = loadTestcases(s.testcaseDir);

    if (s.verifyDeterminism) {
        if (config.testcases.empty())
            throw CliError(kExitConfig, "--verify-determinism needs --testcases");
        CapturedTraces first, second;
        pipeline::RunConfig c1 = config;
        c1.sinks = first.factory();
        auto r1 = pipeline::run(c1);
        pipeline::RunConfig c2 = config;
        c2.sinks = second.factory();
        auto r2 = pipeline::run(c2);
        if (first.bytes() != second.bytes()) {
            err << "trace mismatch between two identical runs\n";
            return kExitNondeterministic;
        }
        if (r1.stdoutBytes != r2.stdoutBytes || r1.finalRegs != r2.finalRegs) {
            err << "guest state mismatch between two identical runs\n";
            return kExitNondeterministic;
        }
        int code = exitCodeFor(r1.status, err);
        if (code != kExitOk)
            return code;
        out.write(reinterpret_cast<const char*>(r1.stdoutBytes.data()),
                  static_cast<std::streamsize>(r1.stdoutBytes.size()));
        out << "deterministic: " << first.bytes().size() << " trace segments identical\n";
        return static_cast<int>(r1.status.exitCode & 0xFF);
    }

    auto result = pipeline::run(config);
    out.write(reinterpret_cast<const char*>(result.stdoutBytes.data()),
              static_cast<std::streamsize>(result.stdoutBytes.size()));
    err.write(reinterpret_cast<const char*>(result.stderrBytes.data()),
              static_cast<std::streamsize>(result.stderrBytes.size()));
    int code = exitCodeFor(result.status, err);
    if (code != kExitOk)
        return code;
    return static_cast<int>(result.status.exitCode & 0xFF);
}

}  // namespace

int runCli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
    CLI::App app{"RISC-V user-mode emulator with side-channel trace analysis"};
    app.require_subcommand(1);

    Settings s;
    bool fixtureList = false;
    std::string traceDir;

    auto addCommon = [&](CLI::App* cmd) {
        cmd->add_option("--config", s.configPath, "JSON config file");
        cmd->add_option("--target", s.targetSymbol, "target function symbol");
        cmd->add_option("--heap-offset-pages", s.heapOffsetPages,
                        "shift the guest heap by N pages");
        cmd->add_option("--fuel", s.fuel, "instruction budget");
    };

    auto* fixture = app.add_subcommand("fixture", "emit a built-in guest program");
    fixture->add_option("name", s.fixtureName, "fixture name");
    fixture->add_flag("--list", fixtureList, "list available fixtures");
    fixture->add_option("--out", s.outputDir, "output directory");

    auto* traceCmd = app.add_subcommand("trace", "run a guest and record raw traces");
    addCommon(traceCmd);
    traceCmd->add_option("--guest", s.guestPath, "guest ELF path");
    traceCmd->add_option("--fixture", s.fixtureName, "use a built-in fixture as guest");
    traceCmd->add_option("--testcases", s.testcaseDir, "directory of test-case files");
    traceCmd->add_flag("--generate", s.generate, "generate test cases first");
    traceCmd->add_option("--count", s.generateCount, "number of generated test cases");
    traceCmd->add_option("--length", s.generateLength, "bytes per generated test case");
    traceCmd->add_option("--seed", s.seed, "generator seed");
    traceCmd->add_option("--out", s.outputDir, "trace output directory")->required();
    traceCmd->add_option("--traced-images", s.tracedImages, "image indices to trace");

    auto* pre = app.add_subcommand("preprocess", "canonicalize raw traces");
    pre->add_option("--traces", traceDir, "raw trace directory")->required();
    pre->add_option("--out", s.outputDir, "canonical trace output directory");

    auto* ana = app.add_subcommand("analyze", "find input-dependent behavior");
    ana->add_option("--traces", traceDir, "raw trace directory")->required();
    ana->add_option("--out", s.outputDir, "report output directory");
    ana->add_option("--format", s.reportFormats, "report formats (text, json)");

    auto* runCmd = app.add_subcommand("run", "execute a guest");
    addCommon(runCmd);
    runCmd->add_option("--guest", s.guestPath, "guest ELF path");
    runCmd->add_option("--fixture", s.fixtureName, "use a built-in fixture as guest");
    runCmd->add_option("--testcases", s.testcaseDir, "directory of test-case files");
    runCmd->add_flag("--verify-determinism", s.verifyDeterminism,
                     "trace twice and require byte-identical results");

    std::vector<char*> argv;
    std::string prog = "ctrv";
    argv.push_back(prog.data());
    for (auto& arg : args)
        argv.push_back(arg.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        return kExitConfig;
    }

    try {
        applyConfigFile(s);
        if (app.got_subcommand(fixture))
            return cmdFixture(s, fixtureList, out, err);
        if (app.got_subcommand(traceCmd))
            return cmdTrace(s, out, err);
        if (app.got_subcommand(pre))
            return cmdPreprocess(s, traceDir, out);
        if (app.got_subcommand(ana))
            return cmdAnalyze(s, traceDir, out);
        if (app.got_subcommand(runCmd))
            return cmdRun(s, out, err);
        err << "no subcommand\n";
        return kExitConfig;
    } catch (const CliError& e) {
        err << "error: " << e.what() << "\n";
        return e.exitCode;
    } catch (const loader::LoadError& e) {
        err << "load error: " << e.what() << "\n";
        return kExitLoad;
    } catch (const guestkit::UnknownFixture& e) {
        err << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const guestkit::AsmError& e) {
        err << "assembler error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const trace::TraceError& e) {
        err << "trace error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const trace::MalformedTrace& e) {
        err << "malformed trace: " << e.what() << "\n";
        return kExitConfig;
    } catch (const trace::PreprocessError& e) {
        err << "preprocess error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const analysis::AnalysisError& e) {
        err << "analysis error: " << e.what() << "\n";
        return kExitConfig;
    }
}

int runCli(std::vector<std::string> args) {
    return runCli(std::move(args), std::cout, std::cerr);
}

}  // namespace ctrv::cli
