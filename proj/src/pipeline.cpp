#include "ctrv/pipeline.hpp"

namespace ctrv::pipeline {

trace::ImageInfo toImageInfo(const loader::LoadedImage& image) {
    return {image.index, image.path, image.startAddr, image.endAddr};
}

RunResult run(const RunConfig& config) {
    loader::GuestMemory mem;
    engine::Engine engine(mem);

    loader::LoadedImage image = loader::loadElf(mem, config.guestElf, config.guestPath, 0);

    std::vector<std::string> argv{config.guestPath};
    for (const auto& tc : config.testcases)
        argv.push_back(tc.name);
    loader::ProcessLayout layout;
    layout.heapOffsetPages = config.heapOffsetPages;
    uint64_t sp = loader::setupProcess(mem, argv, image.endAddr, layout);
    engine.registers().set(2, sp);

    std::optional<trace::TraceSession> session;
    if (config.sinks) {
        session.emplace(engine, config.trace);
        session->attach(config.sinks);
    }

    engine.registerImage(image);
    if (session)
        session->requireTarget();

    RunResult result;
    if (auto target = image.symbol(config.trace.targetSymbol)) {
        result.targetAddress = *target;
        engine.hookFunction(*target);
        engine.hooks().addFunctionEntry(
            [&, target](uint64_t symbolAddr, std::span<const uint64_t>) {
                if (symbolAddr != *target)
                    return;
                size_t index = static_cast<size_t>(result.testcasesEntered++);
                result.retiredAtTargetEntry.push_back(engine.instructionsRetired());
                if (index < config.testcases.size())
                    engine.setInputStream(config.testcases[index].bytes);
                else
                    engine.setInputStream({});
            });
    }

    result.status = engine.run(image.entryPoint, config.fuel);
    if (session)
        session->finish();

    result.cacheStats = engine.cache().stats();
    result.finalRegs = engine.registers().snapshot();
    result.stdoutBytes = engine.stdoutBytes();
    result.stderrBytes = engine.stderrBytes();
    result.images.push_back(toImageInfo(image));
    result.memory = mem.segments();
    return result;
}

}  // namespace ctrv::pipeline
