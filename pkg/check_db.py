from moekit.core.deps import session_scope
from moekit.db.session import init_db
from moekit.models.run import RunRecord


def main():
    init_db()
    with session_scope() as db:
        runs = db.query(RunRecord).order_by(RunRecord.id).all()
        print(f"\nFound {len(runs)} runs in the database:")
        for run in runs:
            print(f"- #{run.id} {run.subcommand} (exit code: {run.exit_code}, at {run.created_at})")
        print("\n")


if __name__ == "__main__":
    main()
