import streamlit as st
import json
import logging
from pathlib import Path
import pandas as pd
from experiment_harness import ALGORITHMS, ExperimentSpec, MetricsFrame, load_metrics, run_experiment, trial_seeds
from scenario_config import PRESETS, scenario_from_mapping, validate_scenario, watts_to_dbm
from simulation_errors import SimulationError

logging.basicConfig(level=logging.INFO)

# Set page configuration
st.set_page_config(
    page_title="HetNet Power Control Lab",
    page_icon="📡",
    layout="wide"
)

def main():
    st.title("📡 HetNet Power Control Lab")
    st.markdown("Train distributed power-control agents and compare them with WMMSE, FP, full and random power")

    tab_run, tab_results = st.tabs(["🚀 Run Experiment", "📊 Browse Results"])

    with tab_run:
        configure_and_run()

    with tab_results:
        browse_results()

def scenario_overrides() -> dict:
    """Collect the scenario settings shown in the form."""
    st.subheader("⚙️ Scenario Configuration")
    col_config1, col_config2, col_config3 = st.columns(3)

    with col_config1:
        preset = st.selectbox("Preset", options=sorted(PRESETS), index=sorted(PRESETS).index("two-layer"))
        rho_mode = st.selectbox("Fading correlation mode", options=["fixed", "random-per-trial", "random-per-slot"])
        rho = st.slider("Correlation rho", min_value=0.0, max_value=1.0, value=0.0, step=0.05,
                        help="Used when the mode is 'fixed'; 0 gives IID fading")

    with col_config2:
        train_slots = st.number_input("Training slots", min_value=0, value=5000, step=500)
        test_slots = st.number_input("Testing slots", min_value=0, value=2000, step=500)
        trials = st.number_input("Trials", min_value=1, value=10, step=1)

    with col_config3:
        T_d = st.number_input("Delay T_d (slots)", min_value=0, value=50, step=10)
        T_u = st.number_input("Update interval T_u (slots)", min_value=1, value=100, step=10)
        D = st.number_input("Mini-batch size D", min_value=1, value=128, step=16)

    return {
        "preset": preset,
        "rho_mode": rho_mode,
        "rho": rho,
        "train_slots": int(train_slots),
        "test_slots": int(test_slots),
        "trials": int(trials),
        "T_d": int(T_d),
        "T_u": int(T_u),
        "D": int(D),
    }

def configure_and_run():
    """Handle experiment configuration and execution."""
    overrides = scenario_overrides()
    try:
        scenario = scenario_from_mapping(overrides)
    except SimulationError as e:
        st.error(f"❌ Invalid configuration: {str(e)}")
        return

    with st.expander("📶 Access points"):
        st.dataframe(pd.DataFrame({
            "AP": range(1, scenario.num_aps + 1),
            "Layer": scenario.layer_of_ap,
            "x (m)": [p[0] for p in scenario.ap_positions],
            "y (m)": [p[1] for p in scenario.ap_positions],
            "Max power (dBm)": [round(watts_to_dbm(p), 1) for p in scenario.p_max_watts],
            "Coverage (m)": scenario.nu_max_m,
        }), use_container_width=True)

    st.divider()
    st.subheader("🧪 Experiment")
    col1, col2 = st.columns(2)
    with col1:
        algorithms = st.multiselect("Algorithms", options=list(ALGORITHMS), default=["masc", "wmmse", "fp", "full", "random"])
        seed = st.number_input("Master seed", min_value=0, value=0, step=1)
    with col2:
        output_dir = st.text_input("Output directory", value="results/streamlit")
        window = st.number_input("Moving-average window", min_value=1, value=200, step=50)
        max_workers = st.number_input("Parallel trials", min_value=1, value=1, step=1)

    validation_result = validate_scenario(scenario, algorithms)
    if validation_result['warnings']:
        with st.expander("⚠️ Configuration Warnings"):
            for warning in validation_result['warnings']:
                st.warning(f"• {warning}")
    if not validation_result['valid']:
        st.error("❌ Validation failed. Please fix the following errors:")
        for error in validation_result['errors']:
            st.error(f"• {error}")
        return
    if not algorithms:
        st.info("💡 Select at least one algorithm to proceed")
        return

    if st.button("Run Experiment", type="primary"):
        try:
            spec = ExperimentSpec(
                scenario=scenario,
                algorithms=algorithms,
                seeds=trial_seeds(int(seed), scenario.trials),
                output_dir=Path(output_dir),
                window=int(window),
                max_workers=int(max_workers),
            )
            progress_bar = st.progress(0)
            status_text = st.empty()
            status_text.text(f"🔄 Running {len(spec.seeds)} trials...")

            def on_trial_done(finished: int, total: int):
                progress_bar.progress(finished / total)
                status_text.text(f"✅ {finished} of {total} trials finished")

            with st.spinner("Simulating..."):
                metrics = run_experiment(spec, on_trial_done=on_trial_done)

            progress_bar.empty()
            status_text.empty()
            st.session_state['metrics'] = metrics
            st.session_state['results_dir'] = str(spec.output_dir)
            st.success(f"🎉 Experiment finished! Results written to {spec.output_dir}")
        except SimulationError as e:
            st.error(f"❌ Error running experiment: {str(e)}")

    if 'metrics' in st.session_state:
        show_metrics(st.session_state['metrics'], st.session_state.get('results_dir'))

def browse_results():
    """Open the output directory of an earlier run."""
    st.subheader("📂 Load Existing Results")
    results_dir = st.text_input("Results directory", value="results", key="browse_dir")
    if st.button("Load Results", type="secondary"):
        try:
            st.session_state['loaded_metrics'] = load_metrics(results_dir)
            st.session_state['loaded_dir'] = results_dir
        except SimulationError as e:
            st.error(f"❌ Error loading results: {str(e)}")

    if 'loaded_metrics' in st.session_state:
        show_metrics(st.session_state['loaded_metrics'], st.session_state.get('loaded_dir'))

def show_metrics(metrics: MetricsFrame, results_dir: str = None):
    """Render curves, summary and downloads for a finished experiment."""
    st.divider()
    st.subheader("📈 Results")
    summary = metrics.summary()

    tab1, tab2, tab3, tab4 = st.tabs(["📈 Training Stage", "🧪 Testing Stage", "📋 Summary", "💾 Download"])

    with tab1:
        train_curves = metrics.moving_averages("train")
        if train_curves.empty:
            st.info("No training slots in this run")
        else:
            st.line_chart(train_curves.set_index("slot") / 1e6, y_label="Sum-rate (Mbps)")

    with tab2:
        test_curves = metrics.moving_averages("test")
        if test_curves.empty:
            st.info("No testing slots in this run")
        else:
            st.line_chart(test_curves.set_index("slot") / 1e6, y_label="Sum-rate (Mbps)")

    with tab3:
        st.dataframe(summary, use_container_width=True)
        test_rows = summary[summary["stage"] == "test"]
        if not test_rows.empty:
            cols = st.columns(len(test_rows))
            for col, (_, row) in zip(cols, test_rows.iterrows()):
                with col:
                    st.metric(row["algorithm"].upper(), f"{row['mean_sum_rate'] / 1e6:,.1f} Mbps")

    with tab4:
        col_dl1, col_dl2, col_dl3 = st.columns(3)
        with col_dl1:
            st.download_button(
                label="📥 Download Summary CSV",
                data=summary.to_csv(index=False),
                file_name="summary.csv",
                mime="text/csv"
            )
        with col_dl2:
            st.download_button(
                label="📥 Download Aggregate CSV",
                data=metrics.aggregate().to_csv(index=False, float_format="%.17g"),
                file_name="aggregate.csv",
                mime="text/csv"
            )
        with col_dl3:
            manifest_path = Path(results_dir) / "manifest.json" if results_dir else None
            if manifest_path is not None and manifest_path.is_file():
                st.download_button(
                    label="📥 Download Manifest",
                    data=json.dumps(json.loads(manifest_path.read_text()), indent=2),
                    file_name="manifest.json",
                    mime="application/json"
                )

    with st.expander("📖 How to read these results"):
        st.markdown("""
        - Curves show the cross-trial mean sum-rate, smoothed with a moving average over the chosen window.
        - During training the agents explore with decaying noise and act with local networks that lag the
          trained actors by the update interval plus the delay.
        - The testing stage runs the trained local networks without exploration noise.
        - WMMSE and FP are given the exact channel of every slot, which the agents never see.
        """)

if __name__ == "__main__":
    main()
