#include <fftw3.h>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <tuple>

#include "mstage/transforms.hpp"

namespace mstage {

namespace {

using cplx = std::complex<double>;

// FFTW planning is not thread-safe; execution with the new-array API is.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

class FftPair {
 public:
  explicit FftPair(std::size_t n) : n_(n) {
    std::lock_guard lock(planner_mutex());
    std::vector<cplx> a(n), b(n);
    auto* in = reinterpret_cast<fftw_complex*>(a.data());
    auto* out = reinterpret_cast<fftw_complex*>(b.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fwd_ = fftw_plan_dft_1d(int(n), in, out, FFTW_FORWARD, flags);
    inv_ = fftw_plan_dft_1d(int(n), in, out, FFTW_BACKWARD, flags);
    if (!fwd_ || !inv_) throw std::runtime_error("fftw: failed to plan length " + std::to_string(n));
  }
  ~FftPair() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }
  FftPair(const FftPair&) = delete;
  FftPair& operator=(const FftPair&) = delete;

  void forward(std::vector<cplx>& in, std::vector<cplx>& out) const {
    fftw_execute_dft(fwd_, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
  }
  /// Normalized inverse (divides by n).
  void inverse(std::vector<cplx>& in, std::vector<cplx>& out) const {
    fftw_execute_dft(inv_, reinterpret_cast<fftw_complex*>(in.data()),
                     reinterpret_cast<fftw_complex*>(out.data()));
    const double s = 1.0 / double(n_);
    for (auto& v : out) v *= s;
  }

 private:
  std::size_t n_;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

const FftPair& fft_for(std::size_t n) {
  static std::mutex m;
  static std::map<std::size_t, std::unique_ptr<FftPair>> cache;
  std::lock_guard lock(m);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<FftPair>(n);
  return *slot;
}

// Gaussian on the unit frequency circle, periodized over neighbouring periods.
double periodic_gauss(double f, double sigma) {
  double s = 0.0;
  for (int p = -3; p <= 3; ++p) {
    const double d = f + p;
    s += std::exp(-d * d / (2.0 * sigma * sigma));
  }
  return s;
}

double grid_frequency(std::size_t k, std::size_t n) { return double(k) / double(n); }

// Bandwidth of a Morlet so neighbouring filters in a Q-per-octave bank cross at
// sqrt(0.5) of their peak.
double morlet_sigma(double xi, int q) {
  const double factor = 1.0 / std::pow(2.0, 1.0 / q);
  const double r = std::sqrt(0.5);
  return xi * (1.0 - factor) / (1.0 + factor) / std::sqrt(2.0 * std::log(1.0 / r));
}

double max_centre_frequency(int q) { return std::max(1.0 / (1.0 + std::pow(2.0, 3.0 / q)), 0.35); }

std::vector<std::vector<double>> morlet_bank(std::size_t n, int q, int octaves) {
  const double xi_max = max_centre_frequency(q);
  const double sigma_max = morlet_sigma(xi_max, q);
  std::vector<std::vector<double>> bank;
  for (int lambda = 0; lambda < octaves * q; ++lambda) {
    const double scale = std::pow(2.0, -double(lambda) / q);
    const double xi = xi_max * scale, sigma = sigma_max * scale;
    const double kappa = periodic_gauss(-xi, sigma) / periodic_gauss(0.0, sigma);
    std::vector<double> h(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double f = grid_frequency(k, n);
      h[k] = periodic_gauss(f - xi, sigma) - kappa * periodic_gauss(f, sigma);
    }
    h[0] = 0.0;  // zero-mean correction makes this exact in theory; pin it against rounding
    bank.push_back(std::move(h));
  }
  return bank;
}

// Circular convolution: out = ifft(spectrum .* response).
void filter(const FftPair& fft, const std::vector<cplx>& spectrum, const std::vector<double>& response,
            std::vector<cplx>& scratch, std::vector<cplx>& out) {
  for (std::size_t k = 0; k < spectrum.size(); ++k) scratch[k] = spectrum[k] * response[k];
  fft.inverse(scratch, out);
}

}  // namespace

void validate_scattering(std::size_t length, const ScatteringConfig& cfg) {
  auto fail = [&](const std::string& why) { throw std::invalid_argument("scattering: " + why); };
  if (cfg.max_order < 1 || cfg.max_order > 2) fail("max order must be 1 or 2");
  if (cfg.q_first < 1 || cfg.q_second < 1) fail("wavelets per octave must be >= 1");
  if (cfg.octaves < 1) fail("octaves must be >= 1");
  if (cfg.octaves >= 63 || (std::size_t{1} << cfg.octaves) > length)
    fail("2^octaves exceeds window length " + std::to_string(length));
  if (cfg.lowpass_scale < 1) fail("lowpass scale must be >= 1");
  if (length % cfg.lowpass_scale != 0)
    fail("window length " + std::to_string(length) + " is not a multiple of lowpass scale " +
         std::to_string(cfg.lowpass_scale));
}

Scattering1D::Scattering1D(std::size_t length, ScatteringConfig cfg) : length_(length), cfg_(cfg) {
  validate_scattering(length, cfg);
  const double sigma_phi = 0.1 / double(cfg.lowpass_scale);
  phi_.resize(length);
  const double dc = periodic_gauss(0.0, sigma_phi);
  for (std::size_t k = 0; k < length; ++k) phi_[k] = periodic_gauss(grid_frequency(k, length), sigma_phi) / dc;

  psi1_ = morlet_bank(length, cfg.q_first, cfg.octaves);
  if (cfg.max_order >= 2) {
    psi2_ = morlet_bank(length, cfg.q_second, cfg.octaves);
    paths2_.resize(psi1_.size());
    for (std::size_t l1 = 0; l1 < psi1_.size(); ++l1) {
      const std::size_t octave1 = l1 / std::size_t(cfg.q_first);
      for (std::size_t l2 = 0; l2 < psi2_.size(); ++l2)
        if (l2 / std::size_t(cfg.q_second) > octave1) paths2_[l1].push_back(l2);
    }
  }
  (void)fft_for(length);
}

std::size_t Scattering1D::path_count() const noexcept {
  std::size_t n = 1 + psi1_.size();
  for (const auto& p : paths2_) n += p.size();
  return n;
}

std::vector<double> Scattering1D::operator()(std::span<const double> x) const {
  if (x.size() != length_)
    throw std::invalid_argument("scattering: expected " + std::to_string(length_) + " samples, got " +
                                std::to_string(x.size()));
  const FftPair& fft = fft_for(length_);
  const std::size_t n = length_, step = cfg_.lowpass_scale, slots = time_samples();

  std::vector<cplx> buf(n), spectrum(n), scratch(n), conv(n), u_spec(n);
  std::vector<double> out;
  out.reserve(output_size());

  auto emit_lowpass = [&](const std::vector<cplx>& spec) {
    filter(fft, spec, phi_, scratch, conv);
    for (std::size_t t = 0; t < slots; ++t) out.push_back(conv[t * step].real());
  };
  auto modulus_spectrum = [&](const std::vector<cplx>& signal, std::vector<cplx>& spec_out) {
    for (std::size_t t = 0; t < n; ++t) buf[t] = std::abs(signal[t]);
    fft.forward(buf, spec_out);
  };

  for (std::size_t t = 0; t < n; ++t) buf[t] = x[t];
  fft.forward(buf, spectrum);
  emit_lowpass(spectrum);

  // First order for every lambda1 before any second-order path.
  std::vector<std::vector<cplx>> u1_spectra(psi1_.size(), std::vector<cplx>(n));
  for (std::size_t l1 = 0; l1 < psi1_.size(); ++l1) {
    filter(fft, spectrum, psi1_[l1], scratch, conv);
    modulus_spectrum(conv, u1_spectra[l1]);
    emit_lowpass(u1_spectra[l1]);
  }
  if (cfg_.max_order >= 2) {
    for (std::size_t l1 = 0; l1 < psi1_.size(); ++l1)
      for (std::size_t l2 : paths2_[l1]) {
        filter(fft, u1_spectra[l1], psi2_[l2], scratch, conv);
        modulus_spectrum(conv, u_spec);
        emit_lowpass(u_spec);
      }
  }
  return out;
}

const Scattering1D& cached_scattering(std::size_t length, const ScatteringConfig& cfg) {
  using Key = std::tuple<std::size_t, int, int, int, int, std::size_t>;
  static std::mutex m;
  static std::map<Key, std::unique_ptr<Scattering1D>> cache;
  const Key key{length, cfg.max_order, cfg.q_first, cfg.q_second, cfg.octaves, cfg.lowpass_scale};
  std::lock_guard lock(m);
  auto& slot = cache[key];
  if (!slot) slot = std::make_unique<Scattering1D>(length, cfg);
  return *slot;
}

std::vector<double> scattering_transform(std::span<const double> channel, const ScatteringConfig& cfg) {
  return cached_scattering(channel.size(), cfg)(channel);
}

}  // namespace mstage
